"""Sparse voxel grid: storage, trilinear sampling, SH shading, checkpoints.

Parameters live in flat per-slot arrays (density, SH coefficients); an
occupancy map sends lattice sites to slots, -1 where empty. Density is
stored unconstrained and clamped to max(0, .) when evaluated. SH
coefficients are (n_slots, 3*K) with the K coefficients of each color
channel contiguous.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CheckpointError, ContractViolation

CHECKPOINT_MAGIC = b"S2CK"
CHECKPOINT_VERSION = 1

SH_C0 = 0.28209479177387814


def sh_dim(degree: int) -> int:
    if degree not in (0, 1, 2):
        raise ContractViolation(f"sh_degree must be 0, 1 or 2, got {degree}")
    return (degree + 1) ** 2


@dataclass
class VoxelGrid:
    """Sparse voxel field over an axis-aligned box."""

    resolution: np.ndarray  # (3,) int
    bbox_min: np.ndarray  # (3,) float64
    bbox_max: np.ndarray  # (3,) float64
    sh_degree: int
    lattice: np.ndarray  # (n_active,) int64, lattice index per slot
    density: np.ndarray  # (n_active,) float32, unconstrained
    sh: np.ndarray  # (n_active, 3*K) float32
    slot_map: np.ndarray = field(repr=False, default=None)  # lattice -> slot

    def __post_init__(self):
        self.resolution = np.asarray(self.resolution, dtype=np.int64)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ContractViolation("bbox must have positive extent on every axis")
        if np.any(self.resolution < 1):
            raise ContractViolation("resolution must be at least 1 per axis")
        kk = sh_dim(self.sh_degree)
        if self.sh.shape != (self.lattice.shape[0], 3 * kk):
            raise ContractViolation(
                f"sh shape {self.sh.shape} does not match {self.lattice.shape[0]} slots at degree {self.sh_degree}"
            )
        if self.density.shape != (self.lattice.shape[0],):
            raise ContractViolation("density must have one value per slot")
        self.density = np.ascontiguousarray(self.density, dtype=np.float32)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float32)
        self.lattice = np.ascontiguousarray(self.lattice, dtype=np.int64)
        if self.slot_map is None:
            self.slot_map = self._build_slot_map()

    def _build_slot_map(self):
        n_sites = int(np.prod(self.resolution))
        if np.any(self.lattice < 0) or np.any(self.lattice >= n_sites):
            raise ContractViolation("lattice index out of range")
        slot_map = np.full(n_sites, -1, dtype=np.int32)
        slot_map[self.lattice] = np.arange(self.lattice.shape[0], dtype=np.int32)
        if np.count_nonzero(slot_map >= 0) != self.lattice.shape[0]:
            raise ContractViolation("duplicate lattice index in occupancy")
        return slot_map

    @classmethod
    def dense(cls, resolution, bbox_min, bbox_max, sh_degree=2, density=0.0, sh=0.0):
        """Fully occupied grid with constant initial parameters."""
        resolution = np.asarray(resolution, dtype=np.int64)
        n = int(np.prod(resolution))
        kk = sh_dim(sh_degree)
        return cls(
            resolution=resolution,
            bbox_min=np.asarray(bbox_min, dtype=np.float64),
            bbox_max=np.asarray(bbox_max, dtype=np.float64),
            sh_degree=sh_degree,
            lattice=np.arange(n, dtype=np.int64),
            density=np.full(n, density, dtype=np.float32),
            sh=np.full((n, 3 * kk), sh, dtype=np.float32),
        )

    @property
    def n_active(self) -> int:
        return int(self.lattice.shape[0])

    @property
    def n_coeffs(self) -> int:
        return sh_dim(self.sh_degree)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / self.resolution

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(
            resolution=self.resolution.copy(),
            bbox_min=self.bbox_min.copy(),
            bbox_max=self.bbox_max.copy(),
            sh_degree=self.sh_degree,
            lattice=self.lattice.copy(),
            density=self.density.copy(),
            sh=self.sh.copy(),
            slot_map=self.slot_map.copy(),
        )


@dataclass
class FieldSample:
    """Field values at one point plus the stencil that produced them."""

    sigma: float  # clamped, >= 0
    raw_sigma: float  # pre-clamp, gates the density gradient
    sh: np.ndarray  # (3, K) float64
    corner_lattice: np.ndarray  # (8,) int64, -1 off-lattice
    corner_weights: np.ndarray  # (8,) float64

    @property
    def corners(self):
        """(lattice index, weight) pairs; index -1 marks the zero slot."""
        return list(zip(self.corner_lattice.tolist(), self.corner_weights.tolist()))


@dataclass
class GridGradients:
    """Per-slot gradient accumulators, always float64."""

    d_density: np.ndarray
    d_sh: np.ndarray

    @classmethod
    def zeros(cls, grid: VoxelGrid) -> "GridGradients":
        return cls(
            d_density=np.zeros(grid.n_active, dtype=np.float64),
            d_sh=np.zeros((grid.n_active, 3 * grid.n_coeffs), dtype=np.float64),
        )

    def clear(self):
        self.d_density.fill(0.0)
        self.d_sh.fill(0.0)


# ---------------------------------------------------------------------------
# sampling


def sample_many(grid: VoxelGrid, positions):
    """Batch trilinear gather; see kernels.sample_field for conventions."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    return kernels.sample_field(
        positions,
        grid.slot_map,
        grid.density,
        grid.sh,
        grid.bbox_min,
        grid.bbox_max,
        grid.resolution,
    )


def trilinear_sample(grid: VoxelGrid, position) -> FieldSample:
    """Field values at one world-space point."""
    position = np.asarray(position, dtype=np.float64)
    if position.shape != (3,):
        raise ContractViolation(f"position must be a 3-vector, got shape {position.shape}")
    raw, sh_s, slots, lattice, w = sample_many(grid, position[None, :])
    return FieldSample(
        sigma=float(max(raw[0], 0.0)),
        raw_sigma=float(raw[0]),
        sh=sh_s[0].reshape(3, grid.n_coeffs),
        corner_lattice=lattice[0],
        corner_weights=w[0],
    )


def eval_sh(sh, direction) -> np.ndarray:
    """Decode SH coefficients to RGB for a unit view direction.

    Applies sigmoid, so the result is always inside (0,1)^3.
    """
    sh = np.asarray(sh, dtype=np.float64)
    if sh.ndim != 2 or sh.shape[0] != 3:
        raise ContractViolation(f"sh must be (3, K), got {sh.shape}")
    kk = sh.shape[1]
    degree = {1: 0, 4: 1, 9: 2}.get(kk)
    if degree is None:
        raise ContractViolation(f"K must be 1, 4 or 9, got {kk}")
    direction = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > 1e-6:
        raise ContractViolation(f"view direction must be unit length, |w|={norm}")
    basis = kernels.sh_basis(direction[None, :], degree)[0]
    return kernels.sigmoid(sh @ basis)


def scatter_gradient(grid: VoxelGrid, sample: FieldSample, d_sigma, d_sh, grads: GridGradients):
    """Accumulate one sample's gradients back onto its stencil.

    d_sigma differentiates the clamped sigma (zero subgradient below the
    clamp); d_sh is (3, K) against the interpolated coefficients.
    """
    d_sh = np.asarray(d_sh, dtype=np.float64)
    kk = grid.n_coeffs
    if d_sh.shape != (3, kk):
        raise ContractViolation(f"d_sh must be (3, {kk}), got {d_sh.shape}")
    slots = np.where(
        sample.corner_lattice >= 0, grid.slot_map[np.maximum(sample.corner_lattice, 0)], -1
    ).astype(np.int32)
    gate = np.array([1.0 if sample.raw_sigma > 0.0 else 0.0])
    kernels.scatter(
        slots[None, :],
        sample.corner_weights[None, :],
        gate,
        np.array([float(d_sigma)]),
        d_sh.reshape(1, 3 * kk),
        grads.d_density,
        grads.d_sh,
    )
    return grads


def prune(grid: VoxelGrid, threshold: float = 1e-4) -> VoxelGrid:
    """Drop voxels whose clamped density stays below threshold across their
    whole 3^3 neighborhood (interpolation is convex, so the field cannot
    exceed that bound anywhere the voxel influences)."""
    nx, ny, nz = (int(v) for v in grid.resolution)
    active = (grid.slot_map >= 0).reshape(nx, ny, nz)
    idx = np.where(grid.slot_map >= 0, grid.slot_map, 0).reshape(nx, ny, nz)
    dens = np.where(active, np.maximum(grid.density, 0.0)[idx], 0.0)
    pad = np.zeros((nx + 2, ny + 2, nz + 2), dtype=np.float64)
    pad[1:-1, 1:-1, 1:-1] = dens
    hood = np.zeros_like(dens)
    for ox in (0, 1, 2):
        for oy in (0, 1, 2):
            for oz in (0, 1, 2):
                np.maximum(hood, pad[ox : ox + nx, oy : oy + ny, oz : oz + nz], out=hood)
    keep_site = active & (hood >= threshold)
    keep_slots = keep_site.reshape(-1)[grid.lattice]
    return VoxelGrid(
        resolution=grid.resolution.copy(),
        bbox_min=grid.bbox_min.copy(),
        bbox_max=grid.bbox_max.copy(),
        sh_degree=grid.sh_degree,
        lattice=grid.lattice[keep_slots].copy(),
        density=grid.density[keep_slots].copy(),
        sh=grid.sh[keep_slots].copy(),
    )


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(grid: VoxelGrid, path):
    """Write the grid to its binary checkpoint format (atomic rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(np.concatenate([grid.bbox_min, grid.bbox_max]).astype("<f8").tobytes())
        f.write(grid.resolution.astype("<u4").tobytes())
        f.write(struct.pack("<I", grid.sh_degree))
        f.write(struct.pack("<Q", grid.n_active))
        f.write(grid.lattice.astype("<u4").tobytes())
        f.write(grid.density.astype("<f4").tobytes())
        f.write(grid.sh.astype("<f4").tobytes())
    os.replace(tmp, path)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> VoxelGrid:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic, not a voxel checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        bbox = np.frombuffer(_read_exact(f, 48, "bbox"), dtype="<f8")
        res = np.frombuffer(_read_exact(f, 12, "resolution"), dtype="<u4").astype(np.int64)
        (degree,) = struct.unpack("<I", _read_exact(f, 4, "sh_degree"))
        (n,) = struct.unpack("<Q", _read_exact(f, 8, "slot count"))
        if degree not in (0, 1, 2):
            raise CheckpointError(f"unsupported sh_degree {degree}")
        if n > int(np.prod(res)):
            raise CheckpointError("more active voxels than lattice sites")
        kk = (degree + 1) ** 2
        lattice = np.frombuffer(_read_exact(f, 4 * n, "lattice"), dtype="<u4").astype(np.int64)
        density = np.frombuffer(_read_exact(f, 4 * n, "density"), dtype="<f4").copy()
        sh = np.frombuffer(_read_exact(f, 4 * n * 3 * kk, "sh"), dtype="<f4").reshape(n, 3 * kk).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    return VoxelGrid(
        resolution=res,
        bbox_min=bbox[:3].copy(),
        bbox_max=bbox[3:].copy(),
        sh_degree=int(degree),
        lattice=lattice,
        density=density,
        sh=sh,
    )


__all__ = [
    "VoxelGrid",
    "FieldSample",
    "GridGradients",
    "sh_dim",
    "sample_many",
    "trilinear_sample",
    "eval_sh",
    "scatter_gradient",
    "prune",
    "save_checkpoint",
    "load_checkpoint",
    "SH_C0",
]
