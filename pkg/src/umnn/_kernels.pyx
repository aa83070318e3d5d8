# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled quadrature kernels for a squareplus MLP integrand with ELU+1 output.

Same contract as ``umnn._kernels_py``. Matrix products go through BLAS
``dgemm`` from scipy; the node loop, bias/activation application and reductions
run in C without temporaries.
"""
import numpy as np

from libc.math cimport exp, sqrt
from scipy.linalg.cython_blas cimport dgemm

cdef enum:
    MAXL = 64


cdef struct Net:
    int L
    int sizes[MAXL + 1]
    double* W[MAXL]
    double* b[MAXL]
    double* gW[MAXL]
    double* gb[MAXL]


cdef inline void gemm_rm(char ta, char tb, int m, int n, int k, double alpha,
                         double* A, int lda, double* B, int ldb,
                         double beta, double* C, int ldc) noexcept nogil:
    # row-major C = op(A) op(B) expressed as column-major C^T = op(B)^T op(A)^T
    dgemm(&tb, &ta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef Net make_net(list Ws, list bs, list gWs, list gbs) except *:
    cdef Net net
    cdef double[:, ::1] w
    cdef double[::1] v
    cdef int l
    net.L = len(Ws)
    if net.L > MAXL:
        raise ValueError(f"at most {MAXL} layers supported")
    for l in range(net.L):
        w = Ws[l]
        v = bs[l]
        net.W[l] = &w[0, 0]
        net.b[l] = &v[0]
        if l == 0:
            net.sizes[0] = w.shape[1]
        net.sizes[l + 1] = w.shape[0]
        if gWs is not None:
            w = gWs[l]
            v = gbs[l]
            net.gW[l] = &w[0, 0]
            net.gb[l] = &v[0]
    return net


cdef inline void squareplus_inplace(double* a, int n) noexcept nogil:
    cdef int r
    cdef double v
    for r in range(n):
        v = a[r]
        a[r] = 0.5 * (v + sqrt(v * v + 4.0))


cdef void net_forward(Net* net, int M, double* x0, double** acts) noexcept nogil:
    cdef int l, r, c, si, so
    cdef double v
    cdef double* a = x0
    cdef double* out
    cdef double* bias
    for l in range(net.L):
        si = net.sizes[l]
        so = net.sizes[l + 1]
        out = acts[l]
        bias = net.b[l]
        for r in range(M):
            for c in range(so):
                out[r * so + c] = bias[c]
        gemm_rm(b'N', b'T', M, so, si, 1.0, a, si, net.W[l], si, 1.0, out, so)
        if l < net.L - 1:
            squareplus_inplace(out, M * so)
        a = out


cdef void net_backward(Net* net, int M, double* x0, double** acts, double* d,
                       double* dn, double* dx0) noexcept nogil:
    """``d`` holds dLoss/dz at the output layer; accumulates grads, writes dx0."""
    cdef int l, r, c, si, so
    cdef double v
    cdef double* a_prev
    cdef double* tmp
    cdef double* gb
    for l in range(net.L - 1, -1, -1):
        si = net.sizes[l]
        so = net.sizes[l + 1]
        a_prev = acts[l - 1] if l > 0 else x0
        gemm_rm(b'T', b'N', so, si, M, 1.0, d, so, a_prev, si, 1.0, net.gW[l], si)
        gb = net.gb[l]
        for r in range(M):
            for c in range(so):
                gb[c] += d[r * so + c]
        if l > 0:
            gemm_rm(b'N', b'N', M, si, so, 1.0, d, so, net.W[l], si, 0.0, dn, si)
            # squareplus'(z) = a^2 / (a^2 + 1) with a = squareplus(z)
            for r in range(M * si):
                v = a_prev[r] * a_prev[r]
                dn[r] = dn[r] * v / (v + 1.0)
            tmp = d
            d = dn
            dn = tmp
        else:
            gemm_rm(b'N', b'N', M, si, so, 1.0, d, so, net.W[0], si, 0.0, dx0, si)


cdef inline double elu1(double z) noexcept nogil:
    return z + 1.0 if z > 0.0 else exp(z)


cdef inline double elu1_grad(double z) noexcept nogil:
    return 1.0 if z > 0.0 else exp(z)


cdef class _Buffers:
    """Raw pointers into a Workspace (node loops) or a _Scratch (point evaluations)."""
    cdef double* x0
    cdef double* acts[MAXL]
    cdef double* d
    cdef double* dn
    cdef double* dx0
    cdef double* t
    cdef double* c0
    cdef double* dsum
    cdef double* dtsum
    cdef object keep

    def __init__(self, ws, int L):
        cdef double[:, ::1] m
        cdef double[::1] v
        cdef int l
        self.keep = ws
        # point evaluations use x0/dx0, node loops use t/c0/dsum/dtsum
        if hasattr(ws, "x0"):
            m = ws.x0
            self.x0 = &m[0, 0]
            m = ws.dx0
            self.dx0 = &m[0, 0]
        else:
            v = ws.t
            self.t = &v[0]
            m = ws.c0
            self.c0 = &m[0, 0]
            m = ws.dsum
            self.dsum = &m[0, 0]
            m = ws.dtsum
            self.dtsum = &m[0, 0]
        for l in range(L):
            m = ws.acts[l]
            self.acts[l] = &m[0, 0]
        m = ws.delta
        self.d = &m[0, 0]
        m = ws.delta_next
        self.dn = &m[0, 0]


class _Scratch:
    def __init__(self, rows, sizes):
        self.x0 = np.empty((rows, sizes[0]))
        self.acts = [np.empty((rows, s)) for s in sizes[1:]]
        self.delta = np.empty((rows, max(sizes)))
        self.delta_next = np.empty((rows, max(sizes)))
        self.dx0 = np.empty((rows, sizes[0]))


cdef void fill_inputs(double* x0, double[::1] t, double[:, ::1] h, int M, int s0) noexcept nogil:
    cdef int r, c
    for r in range(M):
        x0[r * s0] = t[r]
        for c in range(1, s0):
            x0[r * s0 + c] = h[r, c - 1]


def point_forward(list Ws, list bs, double[::1] t, double[:, ::1] h):
    cdef Net net = make_net(Ws, bs, None, None)
    cdef int M = t.shape[0]
    cdef int r
    out = np.empty(M)
    cdef double[::1] o = out
    if M == 0:
        return out
    sc = _Scratch(M, [net.sizes[i] for i in range(net.L + 1)])
    cdef _Buffers buf = _Buffers(sc, net.L)
    with nogil:
        fill_inputs(buf.x0, t, h, M, net.sizes[0])
        net_forward(&net, M, buf.x0, buf.acts)
        for r in range(M):
            o[r] = buf.acts[net.L - 1][r]
    return out


def point_backward(list Ws, list bs, list gWs, list gbs, double[::1] t, double[:, ::1] h,
                   double[::1] grad_z):
    cdef Net net = make_net(Ws, bs, gWs, gbs)
    cdef int M = t.shape[0]
    cdef int s0 = net.sizes[0]
    cdef int r, c
    grad_t = np.zeros(M)
    grad_h = np.zeros((M, s0 - 1))
    if M == 0:
        return grad_t, grad_h
    cdef double[::1] gt = grad_t
    cdef double[:, ::1] gh = grad_h
    sc = _Scratch(M, [net.sizes[i] for i in range(net.L + 1)])
    cdef _Buffers buf = _Buffers(sc, net.L)
    with nogil:
        fill_inputs(buf.x0, t, h, M, s0)
        net_forward(&net, M, buf.x0, buf.acts)
        for r in range(M):
            buf.d[r] = grad_z[r]
        net_backward(&net, M, buf.x0, buf.acts, buf.d, buf.dn, buf.dx0)
        for r in range(M):
            gt[r] = buf.dx0[r * s0]
            for c in range(1, s0):
                gh[r, c - 1] = buf.dx0[r * s0 + c]
    return grad_t, grad_h


cdef void first_layer_const(Net* net, int M, double[:, ::1] h, double* c0) noexcept nogil:
    """``c0 = h W0[:, 1:]^T + b0``: the part of layer 0 shared by every node."""
    cdef int s0 = net.sizes[0]
    cdef int s1 = net.sizes[1]
    cdef int r, c
    for r in range(M):
        for c in range(s1):
            c0[r * s1 + c] = net.b[0][c]
    if s0 > 1:
        gemm_rm(b'N', b'T', M, s1, s0 - 1, 1.0, &h[0, 0], s0 - 1, net.W[0] + 1, s0, 1.0, c0, s1)


cdef void node_forward(Net* net, int M, double* t, double* c0, double** acts) noexcept nogil:
    """Forward pass at one node given the shared layer-0 part ``c0``."""
    cdef int l, r, c, si, so
    cdef int s0 = net.sizes[0]
    cdef int s1 = net.sizes[1]
    cdef double* a = acts[0]
    cdef double* out
    cdef double* bias
    cdef double* W0 = net.W[0]
    for r in range(M):
        for c in range(s1):
            a[r * s1 + c] = c0[r * s1 + c] + t[r] * W0[c * s0]
    if net.L > 1:
        squareplus_inplace(a, M * s1)
    for l in range(1, net.L):
        si = net.sizes[l]
        so = net.sizes[l + 1]
        out = acts[l]
        bias = net.b[l]
        for r in range(M):
            for c in range(so):
                out[r * so + c] = bias[c]
        gemm_rm(b'N', b'T', M, so, si, 1.0, a, si, net.W[l], si, 1.0, out, so)
        if l < net.L - 1:
            squareplus_inplace(out, M * so)
        a = out


cdef double* node_backward(Net* net, int M, double** acts, double* d, double* dn) noexcept nogil:
    """Backprop ``d`` (output gradient) down to layer 0's pre-activation.

    Gradients of layers ``1..L-1`` are accumulated; returns the buffer that
    holds the layer-0 pre-activation gradient.
    """
    cdef int l, r, c, si, so
    cdef double v
    cdef double* tmp
    cdef double* gb
    cdef double* a_prev
    for l in range(net.L - 1, 0, -1):
        si = net.sizes[l]
        so = net.sizes[l + 1]
        a_prev = acts[l - 1]
        gemm_rm(b'T', b'N', so, si, M, 1.0, d, so, a_prev, si, 1.0, net.gW[l], si)
        gb = net.gb[l]
        for r in range(M):
            for c in range(so):
                gb[c] += d[r * so + c]
        gemm_rm(b'N', b'N', M, si, so, 1.0, d, so, net.W[l], si, 0.0, dn, si)
        for r in range(M * si):
            v = a_prev[r] * a_prev[r]
            dn[r] = dn[r] * v / (v + 1.0)
        tmp = d
        d = dn
        dn = tmp
    return d


def quad_forward(list Ws, list bs, double[::1] mid, double[::1] half, double[:, ::1] h,
                 const double[::1] nodes, const double[::1] weights, ws):
    cdef Net net = make_net(Ws, bs, None, None)
    cdef int M = mid.shape[0]
    cdef int N = nodes.shape[0]
    cdef int i, r
    cdef double* z
    cdef double* t
    S = np.zeros(M)
    cdef double[::1] s = S
    if M == 0:
        return S
    cdef _Buffers buf = _Buffers(ws, net.L)
    with nogil:
        first_layer_const(&net, M, h, buf.c0)
        z = buf.acts[net.L - 1]
        t = buf.t
        for i in range(N):
            for r in range(M):
                t[r] = mid[r] + half[r] * nodes[i]
            node_forward(&net, M, t, buf.c0, buf.acts)
            for r in range(M):
                s[r] += weights[i] * elu1(z[r])
    return S


def quad_backward(list Ws, list bs, list gWs, list gbs, double[::1] mid, double[::1] half,
                  double[:, ::1] h, double[::1] scale, const double[::1] nodes, const double[::1] weights,
                  double[:, ::1] grad_h, ws):
    cdef Net net = make_net(Ws, bs, gWs, gbs)
    cdef int M = mid.shape[0]
    cdef int N = nodes.shape[0]
    cdef int s0 = net.sizes[0]
    cdef int s1 = net.sizes[1]
    cdef int i, r, c
    cdef double* z
    cdef double* t
    cdef double* d0
    cdef double* D
    cdef double* Dt
    if M == 0:
        return
    cdef _Buffers buf = _Buffers(ws, net.L)
    with nogil:
        first_layer_const(&net, M, h, buf.c0)
        z = buf.acts[net.L - 1]
        t = buf.t
        D = buf.dsum
        Dt = buf.dtsum
        for r in range(M * s1):
            D[r] = 0.0
            Dt[r] = 0.0
        for i in range(N):
            for r in range(M):
                t[r] = mid[r] + half[r] * nodes[i]
            node_forward(&net, M, t, buf.c0, buf.acts)
            for r in range(M):
                buf.d[r] = weights[i] * scale[r] * elu1_grad(z[r])
            d0 = node_backward(&net, M, buf.acts, buf.d, buf.dn)
            # layer 0 sees [t, h]; h is the same at every node, so only sums are kept
            for r in range(M):
                for c in range(s1):
                    D[r * s1 + c] += d0[r * s1 + c]
                    Dt[r * s1 + c] += d0[r * s1 + c] * t[r]
        for r in range(M):
            for c in range(s1):
                net.gb[0][c] += D[r * s1 + c]
                net.gW[0][c * s0] += Dt[r * s1 + c]
        if s0 > 1:
            gemm_rm(b'T', b'N', s1, s0 - 1, M, 1.0, D, s1, &h[0, 0], s0 - 1, 1.0, net.gW[0] + 1, s0)
            gemm_rm(b'N', b'N', M, s0 - 1, s1, 1.0, D, s1, net.W[0] + 1, s0, 1.0, &grad_h[0, 0], s0 - 1)
