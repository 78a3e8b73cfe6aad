"""Pinhole cameras, ray generation, marching, and compositing.

Rays march the grid with fixed spacing; each sample interval has positive
length and intervals tile [entry, exit) in order. Compositing follows the
standard front-to-back emission-absorption model and keeps per-sample
weights around so the adjoint never has to re-derive them.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ContractViolation
from .grid import VoxelGrid, sample_many


@dataclass
class Camera:
    """Pinhole camera; pose maps camera space to world space."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3,3)
    translation: np.ndarray  # (3,)
    near: float
    far: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ContractViolation("pose must be a 3x3 rotation and 3-vector translation")
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation("image dimensions must be positive")
        if not (0.0 < self.near < self.far):
            raise ContractViolation(f"need 0 < near < far, got near={self.near} far={self.far}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ContractViolation(f"camera rotation is not orthonormal (deviation {err:.3g})")
        if np.linalg.det(self.rotation) < 0.0:
            raise ContractViolation("camera rotation is reflected (determinant -1)")

    @property
    def pose34(self) -> np.ndarray:
        """Row-major 3x4 [R|t]."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @classmethod
    def from_flat_pose(cls, fx, fy, cx, cy, width, height, pose12, near, far) -> "Camera":
        pose = np.asarray(pose12, dtype=np.float64)
        if pose.shape != (12,):
            raise ContractViolation(f"pose must be 12 floats, got {pose.shape}")
        m = pose.reshape(3, 4)
        return cls(fx, fy, cx, cy, int(width), int(height), m[:, :3], m[:, 3], near, far)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit length


@dataclass
class RaySampleBatch:
    """Flat per-sample arrays for a batch of rays; offsets[r]:offsets[r+1]
    slices ray r. Ordered along each ray, deltas all positive."""

    offsets: np.ndarray  # (R+1,) int64
    ts: Optional[np.ndarray]  # (S,) distance along ray
    deltas: np.ndarray  # (S,)
    sigmas: np.ndarray  # (S,) clamped
    raw_sigmas: Optional[np.ndarray]  # (S,) pre-clamp, gates density grads
    colors: np.ndarray  # (S,3) decoded per sample
    corner_slots: Optional[np.ndarray] = None  # (S,8) int32
    corner_weights: Optional[np.ndarray] = None  # (S,8)
    origins: Optional[np.ndarray] = None  # (R,3)
    dirs: Optional[np.ndarray] = None  # (R,3)
    basis: Optional[np.ndarray] = None  # (R,K) SH basis per ray

    @property
    def n_rays(self) -> int:
        return int(self.offsets.shape[0] - 1)

    @property
    def n_samples(self) -> int:
        return int(self.offsets[-1])


@dataclass
class RenderOutput:
    """Composited radiance plus what the backward pass needs."""

    rgb: np.ndarray  # (R,3)
    t_fg: np.ndarray  # (R,) transmittance left after the last sample
    weights: np.ndarray  # (S,) compositing weight per sample
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


def generate_rays(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """World-space rays through pixel centers.

    pixels is (N,2) integer (row, col); out-of-bounds pixels are a
    contract violation. Returns (origins, directions), directions unit.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ContractViolation(f"pixels must be (N,2), got {pixels.shape}")
    rows = pixels[:, 0]
    cols = pixels[:, 1]
    if (
        np.any(rows < 0)
        or np.any(rows >= camera.height)
        or np.any(cols < 0)
        or np.any(cols >= camera.width)
    ):
        raise ContractViolation("pixel coordinates outside the image")
    x = (cols + 0.5 - camera.cx) / camera.fx
    y = (rows + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.translation, d_world.shape).copy()
    return origins, d_world


def full_frame_pixels(camera: Camera) -> np.ndarray:
    rows, cols = np.meshgrid(
        np.arange(camera.height), np.arange(camera.width), indexing="ij"
    )
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)


def march_rays(
    grid: VoxelGrid,
    origins,
    dirs,
    near: float,
    far: float,
    step: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> RaySampleBatch:
    """March a batch of rays with fixed spacing and sample the field.

    step defaults to half the smallest voxel edge. rng enables per-sample
    jitter inside each interval; None means deterministic midpoints.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    if step is None:
        step = float(grid.voxel_size.min()) * 0.5
    if step <= 0.0:
        raise ContractViolation("march step must be positive")
    t_entry, t_exit = kernels.ray_aabb(
        origins, dirs, grid.bbox_min, grid.bbox_max, near, far
    )
    counts, offsets = kernels.march_segments(t_entry, t_exit, step)
    u = rng.random(int(offsets[-1])) if rng is not None else None
    ts, deltas, ray_of = kernels.march_fill(counts, offsets, t_entry, t_exit, step, u)
    positions = origins[ray_of] + ts[:, None] * dirs[ray_of]
    raw, sh_s, slots, _lattice, w = sample_many(grid, positions)
    basis = kernels.sh_basis(dirs, grid.sh_degree)
    colors = kernels.shade(offsets, sh_s, basis)
    return RaySampleBatch(
        offsets=offsets,
        ts=ts,
        deltas=deltas,
        sigmas=np.maximum(raw, 0.0),
        raw_sigmas=raw,
        colors=colors,
        corner_slots=slots,
        corner_weights=w,
        origins=origins,
        dirs=dirs,
        basis=basis,
    )


def march_ray(
    grid: VoxelGrid,
    ray: Ray,
    near: float,
    far: float,
    step: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> RaySampleBatch:
    """Single-ray convenience wrapper; a miss yields an empty batch."""
    return march_rays(
        grid,
        np.asarray(ray.origin, dtype=np.float64)[None, :],
        np.asarray(ray.direction, dtype=np.float64)[None, :],
        near,
        far,
        step,
        rng,
    )


def composite(batch: RaySampleBatch, background=None) -> RenderOutput:
    """Integrate samples front to back. Rays with no samples return the
    background with full residual transmittance."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    if bg.shape != (3,):
        raise ContractViolation("background must be an RGB triple")
    rgb, t_fg, w = kernels.composite_fwd(
        batch.offsets, batch.sigmas, batch.deltas, batch.colors, bg
    )
    return RenderOutput(rgb=rgb, t_fg=t_fg, weights=w, background=bg)


def composite_backward(
    batch: RaySampleBatch, out: RenderOutput, d_rgb, d_tfg=None
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of composite: per-sample (d_sigma, d_colors).

    d_rgb is (R,3) against the composited radiance; d_tfg, when given,
    is (R,) against the residual transmittance. d_sigma differentiates
    the clamped sigma; the caller gates it with raw_sigmas at scatter.
    """
    d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64)
    if d_tfg is None:
        d_tfg = np.zeros(batch.n_rays, dtype=np.float64)
    else:
        d_tfg = np.ascontiguousarray(d_tfg, dtype=np.float64)
    if d_rgb.shape != (batch.n_rays, 3) or d_tfg.shape != (batch.n_rays,):
        raise ContractViolation("gradient shapes do not match the batch")
    return kernels.composite_bwd(
        batch.offsets,
        batch.sigmas,
        batch.deltas,
        batch.colors,
        out.background,
        d_rgb,
        d_tfg,
    )


def render_image(
    grid: VoxelGrid,
    camera: Camera,
    step: Optional[float] = None,
    background=None,
    chunk: int = 8192,
):
    """Render a full frame. Returns (rgb (H,W,3), t_fg (H,W))."""
    if chunk <= 0:
        raise ContractViolation("chunk size must be positive")
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    pixels = full_frame_pixels(camera)
    origins, dirs = generate_rays(camera, pixels)
    out_rgb = np.empty((pixels.shape[0], 3), dtype=np.float64)
    out_tfg = np.empty(pixels.shape[0], dtype=np.float64)
    for lo in range(0, pixels.shape[0], chunk):
        hi = min(lo + chunk, pixels.shape[0])
        batch = march_rays(grid, origins[lo:hi], dirs[lo:hi], camera.near, camera.far, step)
        out = composite(batch, bg)
        out_rgb[lo:hi] = out.rgb
        out_tfg[lo:hi] = out.t_fg
    return (
        out_rgb.reshape(camera.height, camera.width, 3),
        out_tfg.reshape(camera.height, camera.width),
    )


__all__ = [
    "Camera",
    "Ray",
    "RaySampleBatch",
    "RenderOutput",
    "generate_rays",
    "full_frame_pixels",
    "march_rays",
    "march_ray",
    "composite",
    "composite_backward",
    "render_image",
]
