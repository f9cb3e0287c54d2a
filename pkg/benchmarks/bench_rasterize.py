"""Time the compiled and NumPy rasterizer kernels on the same random scenes.

    python3 benchmarks/bench_rasterize.py [--gaussians 200 2000] [--size 64] [--repeat 5]

Reports the best-of-N wall time of forward and backward per backend, and the
max abs difference between backends as a sanity check.
"""

import argparse
import time

import numpy as np

from mv4d.core import Camera
from mv4d.recon.rasterize import available_backends, rasterize, rasterize_backward


def scene(n, rng):
    return (rng.uniform(-0.8, 0.8, (n, 3)), rng.uniform(0.01, 0.08, n),
            rng.uniform(0.05, 0.9, n), rng.uniform(0, 1, (n, 3)))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, nargs="+", default=[200, 2000])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--alpha-min", type=float, default=1 / 255)
    args = ap.parse_args()

    backends = available_backends()
    cam = Camera.look_at([0, 0.5, -3], [0, 0, 0], fx=70.0 * args.size / 64, width=args.size,
                         height=args.size)
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(backends)}; image {args.size}x{args.size}, "
          f"alpha_min {args.alpha_min:.4g}, best of {args.repeat}")
    print(f"{'gaussians':>9} {'backend':>8} {'forward ms':>11} {'backward ms':>12}")
    for n in args.gaussians:
        params = scene(n, rng)
        g_img = rng.normal(size=(args.size, args.size, 3))
        images = {}
        for be in backends:
            fwd, (img, ctx) = best_of(
                lambda: rasterize(*params, cam, alpha_min=args.alpha_min, backend=be), args.repeat)
            bwd, _ = best_of(lambda: rasterize_backward(ctx, g_img), args.repeat)
            images[be] = img
            print(f"{n:>9} {be:>8} {1e3 * fwd:>11.2f} {1e3 * bwd:>12.2f}")
        if len(images) == 2:
            diff = np.abs(images["cython"] - images["numpy"]).max()
            print(f"{'':>9} max |cython - numpy| = {diff:.2e}")


if __name__ == "__main__":
    main()
