"""Synthetic two-sphere scenes for tests and benchmarks.

Builds a ground-truth grid analytically, renders the dataset images from
it, and derives pixel-exact object masks from ray-sphere intersections,
so downstream numbers are attributable: reconstruction quality is limited
only by optimization, never by label noise. Both spheres share one base
color on purpose; after per-object stylization any difference between
the two regions comes from the styles alone.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import VoxelGrid, sh_dim
from .imgio import write_image
from .render import Camera, full_frame_pixels, generate_rays, render_image
from .scene import (
    FrameRecord,
    ObjectMaskSet,
    SceneDataset,
    load_scene,
    save_masks,
    save_scene,
)

SH_C0 = 0.28209479177387814


def _logit(p):
    return float(np.log(p / (1.0 - p)))


@dataclass
class SphereSpec:
    object_id: str
    center: tuple
    radius: float
    color: tuple


@dataclass
class TwoSphereSpec:
    """Everything that defines the synthetic scene."""

    n_frames: int = 22
    width: int = 128
    height: int = 128
    gt_resolution: int = 64
    focal: float = 160.0
    cam_radius: float = 1.9
    near: float = 0.5
    far: float = 4.0
    azimuth_span: float = 110.0  # degrees, centered on the front
    sigma_max: float = 60.0
    spheres: tuple = (
        SphereSpec("sphere_a", (0.32, 0.5, 0.5), 0.16, (0.55, 0.60, 0.50)),
        SphereSpec("sphere_b", (0.68, 0.5, 0.5), 0.16, (0.55, 0.60, 0.50)),
    )
    bbox_min: tuple = (0.0, 0.0, 0.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)


def look_at(position, target, down=(0.0, -1.0, 0.0)) -> np.ndarray:
    """Rotation whose +z looks from position toward target; +y runs down
    the image (rows grow along it)."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def arc_cameras(spec: TwoSphereSpec):
    """Cameras on a front-facing arc with mild elevation changes."""
    center = (np.asarray(spec.bbox_min) + np.asarray(spec.bbox_max)) / 2.0
    cams = []
    for i in range(spec.n_frames):
        frac = i / max(spec.n_frames - 1, 1)
        az = np.deg2rad((frac - 0.5) * spec.azimuth_span)
        el = np.deg2rad(-8.0 + 28.0 * (0.5 - 0.5 * np.cos(2.0 * np.pi * frac)))
        pos = center + spec.cam_radius * np.array(
            [np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)]
        )
        cams.append(
            Camera(
                fx=spec.focal,
                fy=spec.focal,
                cx=spec.width / 2.0,
                cy=spec.height / 2.0,
                width=spec.width,
                height=spec.height,
                rotation=look_at(pos, center),
                translation=pos,
                near=spec.near,
                far=spec.far,
            )
        )
    return cams


def make_gt_grid(spec: TwoSphereSpec) -> VoxelGrid:
    """Analytic density and flat SH color for the two spheres."""
    res = spec.gt_resolution
    grid = VoxelGrid.dense(
        (res, res, res), spec.bbox_min, spec.bbox_max, sh_degree=2, density=0.0, sh=0.0
    )
    lin = (np.arange(res) + 0.5) / res
    extent = np.asarray(spec.bbox_max) - np.asarray(spec.bbox_min)
    xs = spec.bbox_min[0] + lin * extent[0]
    ys = spec.bbox_min[1] + lin * extent[1]
    zs = spec.bbox_min[2] + lin * extent[2]
    px, py, pz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([px, py, pz], axis=-1).reshape(-1, 3)

    voxel = float(extent.min()) / res
    sigma = np.zeros(pts.shape[0])
    nearest = np.full(pts.shape[0], -1)
    nearest_d = np.full(pts.shape[0], np.inf)
    for si, sp in enumerate(spec.spheres):
        d = np.linalg.norm(pts - np.asarray(sp.center), axis=1)
        t = np.clip((sp.radius - d) / (1.5 * voxel) + 0.5, 0.0, 1.0)
        sigma = np.maximum(sigma, spec.sigma_max * t * t * (3.0 - 2.0 * t))
        closer = d < nearest_d
        nearest_d[closer] = d[closer]
        nearest[closer] = si

    grid.density = sigma.astype(np.float32)
    kk = sh_dim(2)
    sh = np.zeros((pts.shape[0], 3 * kk), dtype=np.float32)
    for si, sp in enumerate(spec.spheres):
        sel = nearest == si
        for ch in range(3):
            sh[sel, ch * kk] = _logit(sp.color[ch]) / SH_C0
    grid.sh = sh
    return grid


def sphere_hit(origins, dirs, center, radius):
    """Distance to the first intersection, inf on a miss."""
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.einsum("nd,nd->n", dirs, oc)
    q = np.einsum("nd,nd->n", oc, oc) - radius * radius
    disc = b * b - q
    hit = disc > 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - root
    t1 = -b + root
    t = np.where(t0 > 0.0, t0, t1)
    return np.where(hit & (t > 0.0), t, np.inf)


def analytic_masks(spec: TwoSphereSpec, cameras):
    """Per-frame visibility masks: a pixel belongs to the sphere it hits
    first; occluded spheres lose the pixel."""
    sets = [ObjectMaskSet(sp.object_id, "sphere", {}) for sp in spec.spheres]
    for frame, cam in enumerate(cameras):
        origins, dirs = generate_rays(cam, full_frame_pixels(cam))
        hits = np.stack(
            [sphere_hit(origins, dirs, sp.center, sp.radius) for sp in spec.spheres]
        )
        first = np.argmin(hits, axis=0)
        any_hit = np.isfinite(hits.min(axis=0))
        for si, ms in enumerate(sets):
            ms.masks[frame] = (any_hit & (first == si)).reshape(cam.height, cam.width)
    return sets


def checkerboard(color_a, color_b, cell: int = 8, size: int = 64) -> np.ndarray:
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    board = ((r // cell + c // cell) % 2).astype(np.float64)
    img = np.empty((size, size, 3))
    for ch in range(3):
        img[:, :, ch] = board * color_b[ch] + (1.0 - board) * color_a[ch]
    return img


def stripes(color_a, color_b, width: int = 6, size: int = 64) -> np.ndarray:
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    band = (((r + c) // width) % 2).astype(np.float64)
    img = np.empty((size, size, 3))
    for ch in range(3):
        img[:, :, ch] = band * color_b[ch] + (1.0 - band) * color_a[ch]
    return img


def build_two_sphere_scene(out_dir, spec: TwoSphereSpec = None, step: float = None):
    """Write a complete scene (manifest, images, masks) and return
    (dataset, gt_grid, mask_sets). step is the march spacing used for the
    ground-truth renders; match it at training time for a clean target."""
    spec = spec or TwoSphereSpec()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    gt = make_gt_grid(spec)
    if step is None:
        step = float(gt.voxel_size.min()) * 0.5
    cameras = arc_cameras(spec)

    frames = []
    for i, cam in enumerate(cameras):
        image, _ = render_image(gt, cam, step)
        rel = Path("images") / f"{i:05d}.png"
        write_image(out_dir / rel, image)
        frames.append(FrameRecord(index=i, image_path=rel, camera=cam))
    dataset = SceneDataset(
        frames=frames,
        bbox_min=np.asarray(spec.bbox_min, dtype=np.float64),
        bbox_max=np.asarray(spec.bbox_max, dtype=np.float64),
        root=out_dir,
    )
    save_scene(dataset, out_dir / "scene.json")
    mask_sets = analytic_masks(spec, cameras)
    save_masks(mask_sets, out_dir / "masks")
    return load_scene(out_dir / "scene.json"), gt, mask_sets


__all__ = [
    "SphereSpec",
    "TwoSphereSpec",
    "look_at",
    "arc_cameras",
    "make_gt_grid",
    "sphere_hit",
    "analytic_masks",
    "checkerboard",
    "stripes",
    "build_two_sphere_scene",
]
