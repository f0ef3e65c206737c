#!/usr/bin/env python3
"""Compare the compiled gather/scatter core against the NumPy fallback.

Times the three convolution passes on the layer shapes of the default
super-resolution stack (training batch and inference tile), for both
gather providers, plus the end-to-end effect on one training step.
Run:  python3 benchmarks/bench_backends.py [--threads N]
"""

import argparse
import time

import numpy as np

from uqsr import parallel
from uqsr.backend import _conv, _gather_py

try:
    from uqsr.backend import _gather_cy
except ImportError:
    _gather_cy = None

SHAPES = [
    # name, input (n,X,Y,Z,cin), kernel (k,cin,cout)
    ("L1 train b12 n11", (12, 11, 11, 11, 6), (3, 6, 50)),
    ("L2 train b12 n11", (12, 9, 9, 9, 50), (1, 50, 100)),
    ("L3 train b12 n11", (12, 9, 9, 9, 100), (3, 100, 48)),
    ("L1 tile 16^3", (1, 16, 16, 16, 6), (3, 6, 50)),
    ("L3 tile 14^3", (1, 14, 14, 14, 100), (3, 100, 48)),
]


def timeit(fn, budget=1.0):
    fn()
    t0 = time.perf_counter()
    n = 0
    while time.perf_counter() - t0 < budget:
        fn()
        n += 1
    return (time.perf_counter() - t0) / n * 1e3


def bench_convs(rng):
    providers = [("numpy", _gather_py)]
    if _gather_cy is not None:
        providers.append(("cython", _gather_cy))
    print(f"{'shape':>20s}  {'pass':>8s}" + "".join(f"  {n:>10s}" for n, _ in providers))
    totals = {n: 0.0 for n, _ in providers}
    for name, xs, (k, cin, cout) in SHAPES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal((k, k, k, cin, cout)).astype(np.float32)
        b = np.zeros(cout, np.float32)
        out0, _ = _conv.Conv3d(_gather_py).forward(x, w, b)
        gout = rng.standard_normal(out0.shape).astype(np.float32)
        for label, call in (
            ("fwd", lambda c: c.forward(x, w, b)),
            ("bwd_in", lambda c: c.backward_input(gout, w, x.shape)),
            ("bwd_w", lambda c: c.backward_weight(gout, x, k)),
        ):
            row = f"{name:>20s}  {label:>8s}"
            for pname, prov in providers:
                conv = _conv.Conv3d(prov)
                ms = timeit(lambda: call(conv))
                totals[pname] += ms
                row += f"  {ms:9.2f}ms"
            print(row)
    print(f"{'total':>20s}  {'':>8s}" + "".join(f"  {totals[n]:9.2f}ms" for n, _ in providers))


def bench_training_step(rng):
    import os

    from uqsr import losses
    from uqsr.autodiff import Tensor
    from uqsr.backend import NAME
    from uqsr.networks import NetworkSpec, build_network
    from uqsr.training import Adam

    net = build_network(NetworkSpec.sr_default(rate=2), init_seed=0)
    x = Tensor(rng.standard_normal((12, 9, 9, 9, 6)).astype(np.float32))
    y = Tensor(rng.standard_normal((12, 10, 10, 10, 6)).astype(np.float32))
    opt = Adam(net.parameters())

    def step():
        opt.zero_grad()
        losses.mse_loss(net.forward(x, train=True).mean, y).backward()
        opt.step()

    print(f"\nfull training step (active backend = {NAME}): "
          f"{timeit(step, 2.0):.1f} ms")
    print("(set UQSR_BACKEND=python and rerun to time the fallback end to end)")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    parallel.set_threads(args.threads or parallel.default_threads())
    rng = np.random.default_rng(0)
    bench_convs(rng)
    bench_training_step(rng)


if __name__ == "__main__":
    main()
