"""Compiled vs numpy kernels on the quadrature hot path.

Times ``integrate_forward`` and ``integrate_backward`` of a 4x50 integrand
(q = 10) plus one full training step of the 2D-toy flow, once per available
backend, and checks that the backends agree.

    python benchmarks/bench_kernels.py [--batch 200] [--steps 50] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from umnn import _backend
from umnn.flow import build_flow, nll_loss_and_grads
from umnn.nn import init_mlp
from umnn.quadrature import NetIntegrand, compute_cc_weights, integrate_backward, integrate_forward


def best_ms(fn, repeat):
    return 1000 * min(timeit.repeat(fn, number=1, repeat=repeat))


def run(batch, steps, repeat):
    rng = np.random.default_rng(0)
    f = NetIntegrand(init_mlp([11, 50, 50, 50, 50, 1], 0))
    x, h, g = rng.normal(size=batch), rng.normal(size=(batch, 10)), rng.normal(size=batch)
    rule = compute_cc_weights(steps)
    model = build_flow(2, 1, seed=0)
    data = rng.normal(size=(100, 2))

    rows, outputs = [], {}
    for name in _backend.available():
        with _backend.use_backend(name):
            fwd = best_ms(lambda: integrate_forward(f, 0.0, x, h, rule), repeat)
            bwd = best_ms(lambda: integrate_backward(f, 0.0, x, h, g, rule), repeat)
            step = best_ms(lambda: nll_loss_and_grads(model, data, steps), repeat)
            f.params.zero_grad()
            outputs[name] = (integrate_forward(f, 0.0, x, h, rule), integrate_backward(f, 0.0, x, h, g, rule)[1])
        rows.append((name, fwd, bwd, step))

    print(f"batch {batch}, {steps} nodes, best of {repeat}")
    print(f"{'backend':10s} {'forward ms':>11s} {'backward ms':>12s} {'train step ms':>14s}")
    for name, fwd, bwd, step in rows:
        print(f"{name:10s} {fwd:11.2f} {bwd:12.2f} {step:14.2f}")
    if len(rows) == 2:
        (_, f1, b1, s1), (_, f2, b2, s2) = sorted(rows, key=lambda r: r[0] != "python")
        print(f"speedup    {f1 / f2:10.2f}x {b1 / b2:11.2f}x {s1 / s2:13.2f}x")
        (F1, G1), (F2, G2) = outputs["python"], outputs["compiled"]
        print(f"max rel difference: forward {np.max(np.abs(F1 - F2) / np.abs(F1)):.1e}, "
              f"grad_h {np.max(np.abs(G1 - G2)) / np.max(np.abs(G1)):.1e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=200)
    parser.add_argument("--steps", type=int, default=50)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    run(args.batch, args.steps, args.repeat)


if __name__ == "__main__":
    main()
