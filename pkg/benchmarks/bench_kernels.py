"""Compiled versus NumPy stencil kernels.

Times the gradient, its adjoint, the ball projection and the fused
primal-dual loop on square grids for both backends, checks that the two
agree, and prints one CSV row per (kernel, size).

Usage: python benchmarks/bench_kernels.py [--sizes 64 128 256] [--repeat 5]
"""
import argparse
import sys
import timeit

import numpy as np

from tvbilevel import _pykernels

try:
    from tvbilevel import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(m, rng):
    u = rng.random((m, m))
    q = rng.standard_normal((m, m, 2))
    alpha = np.full((1, m, m), 0.05)
    schemes = np.array([0], dtype=np.int64)
    tau = sigma = 0.99 / np.sqrt(8.0)

    def grad(mod):
        out = np.empty((m, m, 2))
        return lambda: mod.grad(u, 0, out)

    def adjoint(mod):
        out = np.empty((m, m))
        return lambda: mod.grad_adjoint(q, 0, out)

    def project(mod):
        r = alpha[0]
        return lambda: mod.project_balls(q.copy(), r)

    def pdhg(mod):
        def call():
            uu, ub, qq = u.copy(), u.copy(), np.zeros((1, m, m, 2))
            mod.pdhg_iterate(u, alpha, schemes, uu, ub, qq, tau, sigma, 20)
            return uu
        return call

    return {"grad": grad, "grad_adjoint": adjoint, "project_balls": project, "pdhg_iterate_x20": pdhg}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; only the NumPy backend is timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    print("kernel,size,python_ms,cython_ms,speedup,max_abs_diff")
    for m in args.sizes:
        for name, make in cases(m, rng).items():
            py = make(_pykernels)
            t_py = min(timeit.repeat(py, number=1, repeat=args.repeat)) * 1e3
            if _ckernels is None:
                print(f"{name},{m},{t_py:.3f},,,")
                continue
            cy = make(_ckernels)
            t_cy = min(timeit.repeat(cy, number=1, repeat=args.repeat)) * 1e3
            a, b = py(), cy()
            diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if a is not None else 0.0
            print(f"{name},{m},{t_py:.3f},{t_cy:.3f},{t_py / t_cy:.1f},{diff:.1e}")


if __name__ == "__main__":
    main()
