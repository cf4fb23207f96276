"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 5] [--rays 4096] [--samples 64]

Prints one line per kernel with the best-of-N time of each backend, the
speedup and the largest absolute difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from latent_nerf import _kernels


def _cases(rays, samples, rng):
    sigma = rng.gamma(1.0, 2.0, (rays, samples)).astype(np.float32)
    delta = np.full((rays, samples), 4.0 / samples, np.float32)
    w, tr = _kernels.python.composite_forward(sigma, delta)
    gw = rng.normal(size=(rays, samples)).astype(np.float32)
    s = np.sort(rng.random((rays, samples)), axis=1).astype(np.float32)
    ds = np.full((rays, samples), 1.0 / samples, np.float32)
    g = rng.normal(size=rays).astype(np.float32)
    m = 64 * 64
    values = rng.random((m, 3))
    u = rng.uniform(-1, 64, m)
    v = rng.uniform(-1, 64, m)
    return {
        "composite_forward": (sigma, delta),
        "composite_backward": (gw, sigma, delta, w, tr),
        "distortion_forward": (w, s, ds),
        "distortion_backward": (g, w, s, ds),
        "splat_bilinear": (values, u, v, 64, 64),
    }


def _flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.asarray(p, np.float64).ravel() for p in parts])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--samples", type=int, default=64)
    args = ap.parse_args(argv)
    if _kernels.compiled is None:
        print("compiled extension not built; run `python setup.py build_ext --inplace`")
        return 1
    cases = _cases(args.rays, args.samples, np.random.default_rng(0))
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max diff':>11}")
    for name, inputs in cases.items():
        py, cy = getattr(_kernels.python, name), getattr(_kernels.compiled, name)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=1, repeat=args.repeats))
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=1, repeat=args.repeats))
        diff = np.max(np.abs(_flat(py(*inputs)) - _flat(cy(*inputs))))
        print(f"{name:<22}{t_py * 1e3:>10.2f}{t_cy * 1e3:>11.2f}{t_py / t_cy:>8.1f}x{diff:>11.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
