"""Shared fixtures: seeded grids, ray batches, and a tiny on-disk scene."""

import numpy as np
import pytest

from stylevox.datagen import TwoSphereSpec, build_two_sphere_scene
from stylevox.grid import VoxelGrid


def make_random_grid(rng, resolution=(4, 4, 4), sh_degree=2, occupancy=1.0, bbox=None):
    """Dense or randomly-thinned grid with seeded parameters."""
    res = np.asarray(resolution, dtype=np.int64)
    bbox_min = np.zeros(3) if bbox is None else np.asarray(bbox[0], dtype=np.float64)
    bbox_max = np.ones(3) if bbox is None else np.asarray(bbox[1], dtype=np.float64)
    n_lattice = int(res.prod())
    if occupancy >= 1.0:
        lattice = np.arange(n_lattice, dtype=np.int64)
    else:
        keep = rng.random(n_lattice) < occupancy
        keep[rng.integers(0, n_lattice)] = True  # never fully empty
        lattice = np.flatnonzero(keep).astype(np.int64)
    n = lattice.shape[0]
    kk = 3 * (sh_degree + 1) ** 2
    return VoxelGrid(
        resolution=res,
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        sh_degree=sh_degree,
        lattice=lattice,
        density=rng.normal(1.0, 2.0, n).astype(np.float32),
        sh=rng.normal(0.0, 0.5, (n, kk)).astype(np.float32),
    )


def random_directions(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_scene(tmp_path_factory):
    """Six 48x48 frames around two small spheres, 32^3 ground truth.

    Session-scoped: the scene is read-only for every consumer.
    """
    root = tmp_path_factory.mktemp("micro_scene")
    spec = TwoSphereSpec(n_frames=6, width=48, height=48, gt_resolution=32)
    dataset, gt_grid, mask_sets = build_two_sphere_scene(root, spec=spec)
    return dataset, gt_grid, mask_sets, root
