"""Time the compiled kernels against the pure NumPy fallback.

Runs the full per-iteration pipeline (march, sample, shade, composite,
backward, scatter, TV) on a mid-size grid with both backends and prints
a per-kernel table. Usage:

    python benchmarks/bench_kernels.py [--resolution 64] [--rays 4096] [--repeat 5]
"""

import argparse
import time

import numpy as np

from stylevox import kernels
from stylevox.grid import VoxelGrid
from stylevox.kernels import npk


def build_inputs(resolution, n_rays, seed=0):
    rng = np.random.default_rng(seed)
    res = (resolution,) * 3
    grid = VoxelGrid.dense(res, np.zeros(3), np.ones(3), sh_degree=2,
                           density=0.0, sh=0.0)
    grid.density = rng.normal(0.5, 0.5, grid.n_active).astype(np.float32)
    grid.sh = rng.normal(0.0, 0.3, grid.sh.shape).astype(np.float32)

    center = np.array([0.5, 0.5, 0.5])
    eyes = rng.normal(size=(n_rays, 3))
    eyes = center + 2.0 * eyes / np.linalg.norm(eyes, axis=1, keepdims=True)
    looks = rng.random((n_rays, 3))
    dirs = looks - eyes
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near = np.full(n_rays, 0.05)
    far = np.full(n_rays, 6.0)
    return grid, eyes, dirs, near, far


def run_pipeline(mod, grid, origins, dirs, near, far, step):
    steps = {}

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        steps[name] = time.perf_counter() - t0
        return out

    te, tx = timed("ray_aabb", mod.ray_aabb, origins, dirs,
                   grid.bbox_min, grid.bbox_max, near, far)
    counts, offsets = timed("march_segments", mod.march_segments, te, tx, step)
    ts, deltas, ray_of = timed("march_fill", mod.march_fill, counts, offsets,
                               te, tx, step, None)
    positions = origins[ray_of] + ts[:, None] * dirs[ray_of]
    raw, sh_s, corner_slot, _, corner_w = timed(
        "sample_field", mod.sample_field, positions, grid.slot_map,
        grid.density, grid.sh, grid.bbox_min, grid.bbox_max, grid.resolution)
    basis = timed("sh_basis", mod.sh_basis, dirs, grid.sh_degree)
    colors = timed("shade", mod.shade, offsets, sh_s, basis)
    sigmas = np.maximum(raw, 0.0)
    bg = np.zeros(3)
    rgb, t_fg, _ = timed("composite_fwd", mod.composite_fwd, offsets, sigmas,
                         deltas, colors, bg)
    d_rgb = np.full_like(rgb, 1e-2)
    d_tfg = np.full(rgb.shape[0], 1e-3)
    d_sigma, d_colors = timed("composite_bwd", mod.composite_bwd, offsets, sigmas,
                              deltas, colors, bg, d_rgb, d_tfg)
    d_sh = timed("shade_bwd", mod.shade_bwd, offsets, colors, basis, d_colors)
    gate = (raw > 0.0).astype(np.float64)
    out_d = np.zeros(grid.n_active)
    out_sh = np.zeros((grid.n_active, 3 * grid.n_coeffs))
    timed("scatter", mod.scatter, corner_slot, corner_w, gate, d_sigma, d_sh,
          out_d, out_sh)
    timed("tv_grad", mod.tv_grad, grid.slot_map, grid.density, grid.sh,
          grid.resolution, 1e-8, 1e-3, out_d, out_sh)
    return steps, int(sigmas.shape[0])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--resolution", type=int, default=64)
    parser.add_argument("--rays", type=int, default=4096)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    grid, origins, dirs, near, far = build_inputs(args.resolution, args.rays)
    step = float(grid.voxel_size.min()) * 0.5

    results = {}
    n_samples = 0
    for name, mod in kernels.backends():
        best = {}
        for _ in range(args.repeat):
            steps, n_samples = run_pipeline(mod, grid, origins, dirs, near, far, step)
            for key, dt in steps.items():
                best[key] = min(best.get(key, dt), dt)
        results[name] = best

    print(f"grid {args.resolution}^3, {args.rays} rays, {n_samples} samples, "
          f"best of {args.repeat}")
    names = list(results)
    header = f"{'kernel':<16}" + "".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    total = dict.fromkeys(names, 0.0)
    for key in results[names[0]]:
        row = f"{key:<16}"
        for n in names:
            row += f"{results[n][key] * 1e3:>10.2f}ms"
            total[n] += results[n][key]
        if len(names) == 2:
            row += f"{results[names[0]][key] / results[names[1]][key]:>9.1f}x"
        print(row)
    row = f"{'total':<16}"
    for n in names:
        row += f"{total[n] * 1e3:>10.2f}ms"
    if len(names) == 2:
        row += f"{total[names[0]] / total[names[1]]:>9.1f}x"
    print(row)


if __name__ == "__main__":
    main()
