"""Pure-numpy quadrature kernels for a squareplus MLP integrand with ELU+1 output.

Reference implementation and fallback for the compiled ``_kernels``. The
forward quadrature evaluates all nodes in one batched call; the backward
quadrature loops over nodes writing only into the workspace buffers.
"""
import numpy as np


def _inputs(t, h):
    x = np.empty((t.shape[0], 1 + h.shape[1]))
    x[:, 0] = t
    x[:, 1:] = h
    return x


def squareplus_(z, tmp):
    """In-place ``(z + sqrt(z^2 + 4)) / 2`` with ``tmp`` as same-shape scratch."""
    np.multiply(z, z, out=tmp)
    tmp += 4.0
    np.sqrt(tmp, out=tmp)
    z += tmp
    z *= 0.5
    return z


def squareplus_grad_(a, out):
    """Derivative from the activation ``a``: ``a^2 / (a^2 + 1)``."""
    np.multiply(a, a, out=out)
    np.divide(out, out + 1.0, out=out)
    return out


def _forward(Ws, bs, x):
    acts = [x]
    a = x
    last = len(Ws) - 1
    for l in range(len(Ws)):
        z = a @ Ws[l].T
        z += bs[l]
        if l < last:
            squareplus_(z, np.empty_like(z))
        acts.append(z)
        a = z
    return acts


def _backward(Ws, gWs, gbs, acts, g):
    for l in range(len(Ws) - 1, -1, -1):
        gWs[l] += g.T @ acts[l]
        gbs[l] += g.sum(axis=0)
        g = g @ Ws[l]
        if l > 0:
            g *= squareplus_grad_(acts[l], np.empty_like(acts[l]))
    return g


def point_forward(Ws, bs, t, h):
    return _forward(Ws, bs, _inputs(t, h))[-1][:, 0].copy()


def point_backward(Ws, bs, gWs, gbs, t, h, grad_z):
    acts = _forward(Ws, bs, _inputs(t, h))
    gx = _backward(Ws, gWs, gbs, acts, np.asarray(grad_z, dtype=np.float64)[:, None])
    return gx[:, 0].copy(), gx[:, 1:].copy()


def _first_layer_const(Ws, bs, h, out):
    """Layer-0 pre-activation without the ``t`` column; the same at every node."""
    np.matmul(h, Ws[0][:, 1:].T, out=out)
    out += bs[0]
    return out


def quad_forward(Ws, bs, mid, half, h, nodes, weights, ws=None):
    n, b = nodes.shape[0], mid.shape[0]
    c0 = _first_layer_const(Ws, bs, h, np.empty((b, Ws[0].shape[0])))
    t = mid[None, :] + half[None, :] * nodes[:, None]
    z = (t[:, :, None] * Ws[0][:, 0] + c0[None]).reshape(n * b, Ws[0].shape[0])
    L = len(Ws)
    if L > 1:
        squareplus_(z, np.empty_like(z))
    for l in range(1, L):
        z = z @ Ws[l].T
        z += bs[l]
        if l < L - 1:
            squareplus_(z, np.empty_like(z))
    z = z[:, 0].reshape(n, b)
    f = np.where(z > 0, z + 1.0, np.exp(np.minimum(z, 0.0)))
    return weights @ f


def quad_backward(Ws, bs, gWs, gbs, mid, half, h, scale, nodes, weights, grad_h, ws):
    L = len(Ws)
    s1 = Ws[0].shape[0]
    c0 = _first_layer_const(Ws, bs, h, ws.c0)
    t = ws.t
    acts = ws.acts
    D, Dt = ws.dsum, ws.dtsum
    D.fill(0.0)
    Dt.fill(0.0)
    for i in range(nodes.shape[0]):
        np.multiply(half, nodes[i], out=t)
        t += mid
        a = acts[0]
        np.multiply(t[:, None], Ws[0][:, 0], out=a)
        a += c0
        if L > 1:
            squareplus_(a, ws.scratch[:, :s1])
        for l in range(1, L):
            z = acts[l]
            np.matmul(a, Ws[l].T, out=z)
            z += bs[l]
            if l < L - 1:
                squareplus_(z, ws.scratch[:, :z.shape[1]])
            a = z
        # d f / d z of ELU+1 is exp(min(z, 0))
        d = ws.delta[:, :1]
        np.minimum(acts[L - 1], 0.0, out=d)
        np.exp(d, out=d)
        d *= scale[:, None]
        d *= weights[i]
        for l in range(L - 1, 0, -1):
            a_prev = acts[l - 1]
            gWs[l] += np.matmul(d.T, a_prev)
            gbs[l] += d.sum(axis=0)
            width = a_prev.shape[1]
            nxt = ws.delta_next[:, :width] if d.base is ws.delta else ws.delta[:, :width]
            np.matmul(d, Ws[l], out=nxt)
            nxt *= squareplus_grad_(a_prev, ws.scratch[:, :width])
            d = nxt
        # h is the same at every node: keep sums, apply layer 0 once at the end
        D += d
        np.multiply(d, t[:, None], out=ws.scratch[:, :s1])
        Dt += ws.scratch[:, :s1]
    gbs[0] += D.sum(axis=0)
    gWs[0][:, 0] += Dt.sum(axis=0)
    gWs[0][:, 1:] += D.T @ h
    grad_h += D @ Ws[0][:, 1:]
