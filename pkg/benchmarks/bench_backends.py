"""Compiled vs numpy kernels: splat forward, splat backward and Siddon ray casting.

    python benchmarks/bench_backends.py [--gaussians 2000] [--size 128] [--repeats 5]
"""

import argparse
import time

import numpy as np

from ddgs import _backend
from ddgs.drrcast import raw_projection
from ddgs.geometry import CameraView, Intrinsics, orbit_pose
from ddgs.gsmodel import DIRECTIONAL, ISOTROPIC, GaussianSet, RadiosityModel
from ddgs.splat import render, render_backward
from ddgs.volume import default_phantom_spec, hu_to_density, make_phantom


def scene(n, size, seed=0):
    rng = np.random.default_rng(seed)

    def mk(m, kind):
        return GaussianSet.create(rng.uniform(-40, 40, (m, 3)), rng.uniform(np.log(1), np.log(4), m), 8, kind, 0.3)

    view = CameraView(orbit_pose(30.0, 400.0), Intrinsics(2.5 * size, size, size))
    return mk(n - n // 4, ISOTROPIC), mk(n // 4, DIRECTIONAL), RadiosityModel.init(), view


def best_ms(fn, repeats):
    out = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        out.append(1e3 * (time.perf_counter() - t))
    return min(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gaussians", type=int, default=2000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    iso, dir_, model, view = scene(args.gaussians, args.size)
    vol = hu_to_density(make_phantom(default_phantom_spec()))
    dl = np.ones((args.size, args.size))
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in sorted(_backend.BACKENDS)))
    rows = {"splat forward": {}, "splat backward": {}, "siddon": {}}
    for b in sorted(_backend.BACKENDS):
        _, inter = render(iso, dir_, model, view, b)
        rows["splat forward"][b] = best_ms(lambda: render(iso, dir_, model, view, b), args.repeats)
        rows["splat backward"][b] = best_ms(lambda: render_backward(inter, dl, want_pose_grad=True), args.repeats)
        rows["siddon"][b] = best_ms(lambda: raw_projection(vol, view, b), args.repeats)
    for name, t in rows.items():
        print(f"{name:<18}" + "".join(f"{t[b]:>10.1f}ms" for b in sorted(_backend.BACKENDS)))


if __name__ == "__main__":
    main()
