"""NumPy implementations of the hot kernels.

These are the reference semantics: the Cython twins in ck.pyx must agree
with everything here to float tolerance (summation order may differ, so
agreement is allclose, not bitwise). Within one backend every function
is deterministic; grid accumulation goes through np.add.at, which applies
updates in argument order.

Conventions shared by both backends:
  * voxel centers sit at integer lattice coordinates; the continuous grid
    coordinate of a point p is (p - bbox_min) * inv_voxel - 0.5
  * lattice sites linearize as (ix * ny + iy) * nz + iz
  * slot_map maps lattice index -> parameter slot, -1 where empty
  * corners that fall off the lattice keep their interpolation weight but
    carry lattice/slot index -1 and contribute zero parameters
"""

import numpy as np

K_MAX = 9  # SH coefficients per channel at the highest supported degree

# real SH basis constants, Plenoxels sign convention
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# ray marching


def ray_aabb(origins, dirs, bbox_min, bbox_max, near, far):
    """Clip rays against the box. Returns (t_entry, t_exit); exit <= entry
    means a miss. near/far are applied here."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = (bbox_min[None, :] - origins) / dirs
        hi = (bbox_max[None, :] - origins) / dirs
    t0 = np.minimum(lo, hi)
    t1 = np.maximum(lo, hi)
    # 0/0 at a face touch: treat the axis as unconstrained
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    # rays parallel to an axis and outside its slab never hit
    par = dirs == 0.0
    out = par & ((origins < bbox_min[None, :]) | (origins > bbox_max[None, :]))
    t0 = np.where(out, np.inf, t0)
    t1 = np.where(out, -np.inf, t1)
    t_entry = np.maximum(t0.max(axis=1), near)
    t_exit = np.minimum(t1.min(axis=1), far)
    return t_entry, t_exit


def march_segments(t_entry, t_exit, step):
    """Fixed-spacing sample counts per ray. Returns (counts, offsets)."""
    if step <= 0.0:
        raise ValueError("march step must be positive")
    span = t_exit - t_entry
    counts = np.where(span > 0.0, np.ceil(span / step), 0.0).astype(np.int64)
    offsets = np.zeros(counts.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return counts, offsets


def march_fill(counts, offsets, t_entry, t_exit, step, u=None):
    """Place samples. Interval k covers [k*step, (k+1)*step) past the entry
    point, except the last which is cut at the exit. u in [0,1) positions
    the sample inside its interval; None means midpoint."""
    total = int(offsets[-1])
    ray_of = np.repeat(np.arange(counts.shape[0], dtype=np.int64), counts)
    k = np.arange(total, dtype=np.int64) - offsets[ray_of]
    span = t_exit - t_entry
    last = k == counts[ray_of] - 1
    deltas = np.where(last, span[ray_of] - (counts[ray_of] - 1) * step, step)
    if u is None:
        u = np.full(total, 0.5)
    ts = t_entry[ray_of] + k * step + u * deltas
    return ts, deltas, ray_of


# ---------------------------------------------------------------------------
# field sampling

_CORNER_BITS = [(c >> 2 & 1, c >> 1 & 1, c & 1) for c in range(8)]


def sample_field(positions, slot_map, density, sh, bbox_min, bbox_max, res):
    """Trilinear gather at world positions.

    Returns (raw_sigma, sh_s, corner_slot, corner_lattice, corner_w) with
    raw_sigma unclamped. Outside the box everything is zero and indices
    are -1; inside, off-lattice corners keep weight but index -1.
    """
    positions = np.asarray(positions, dtype=np.float64)
    s = positions.shape[0]
    nx, ny, nz = int(res[0]), int(res[1]), int(res[2])
    kk = sh.shape[1]
    inv_vox = np.asarray(res, dtype=np.float64) / (bbox_max - bbox_min)
    inside = np.all((positions >= bbox_min) & (positions <= bbox_max), axis=1)

    g = (positions - bbox_min[None, :]) * inv_vox[None, :] - 0.5
    i0 = np.floor(g).astype(np.int64)
    f = g - i0

    corner_lattice = np.full((s, 8), -1, dtype=np.int64)
    corner_slot = np.full((s, 8), -1, dtype=np.int32)
    corner_w = np.zeros((s, 8), dtype=np.float64)
    raw_sigma = np.zeros(s, dtype=np.float64)
    sh_s = np.zeros((s, kk), dtype=np.float64)

    for c, (bx, by, bz) in enumerate(_CORNER_BITS):
        ix = i0[:, 0] + bx
        iy = i0[:, 1] + by
        iz = i0[:, 2] + bz
        w = (
            (f[:, 0] if bx else 1.0 - f[:, 0])
            * (f[:, 1] if by else 1.0 - f[:, 1])
            * (f[:, 2] if bz else 1.0 - f[:, 2])
        )
        w = np.where(inside, w, 0.0)
        on = inside & (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        lat = np.where(on, (ix * ny + iy) * nz + iz, -1)
        slot = np.where(on, slot_map[np.where(on, lat, 0)], -1).astype(np.int32)
        corner_lattice[:, c] = lat
        corner_slot[:, c] = slot
        corner_w[:, c] = w
        occ = slot >= 0
        si = np.where(occ, slot, 0)
        raw_sigma += np.where(occ, w * density[si], 0.0)
        sh_s += np.where(occ, w, 0.0)[:, None] * sh[si].astype(np.float64)
    return raw_sigma, sh_s, corner_slot, corner_lattice, corner_w


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, degree):
    """Basis values for unit directions; (N, (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    kk = (degree + 1) ** 2
    out = np.empty((n, kk), dtype=np.float64)
    out[:, 0] = _C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1] = -_C1 * y
        out[:, 2] = _C1 * z
        out[:, 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _C2[0] * x * y
        out[:, 5] = _C2[1] * y * z
        out[:, 6] = _C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = _C2[3] * x * z
        out[:, 8] = _C2[4] * (xx - yy)
    return out


def shade(offsets, sh_s, basis):
    """sigmoid(sum_k c_k Y_k) per sample and channel. sh_s is (S, 3K) with
    the K coefficients of each channel contiguous; basis is per ray."""
    counts = np.diff(offsets)
    bs = np.repeat(basis, counts, axis=0)  # (S, K)
    kk = basis.shape[1]
    raw = np.einsum("sck,sk->sc", sh_s.reshape(-1, 3, kk), bs)
    return sigmoid(raw)


def shade_bwd(offsets, colors, basis, d_colors):
    """Adjoint of shade: d(loss)/d(sh_s) given d(loss)/d(colors)."""
    counts = np.diff(offsets)
    bs = np.repeat(basis, counts, axis=0)
    d_raw = d_colors * colors * (1.0 - colors)
    d_sh = np.einsum("sc,sk->sck", d_raw, bs)
    return d_sh.reshape(colors.shape[0], -1)


# ---------------------------------------------------------------------------
# compositing

def _transmittance(offsets, sigmas, deltas):
    """Per-sample T at the sample and per-ray T after the last sample."""
    a = sigmas * deltas
    cs = np.cumsum(a)
    starts = offsets[:-1]
    counts = np.diff(offsets)
    has = counts > 0
    base = np.zeros(counts.shape[0], dtype=np.float64)
    base[has] = cs[starts[has]] - a[starts[has]]
    incl = cs - np.repeat(base, counts)
    excl = incl - a
    t_fg = np.ones(counts.shape[0], dtype=np.float64)
    ends = offsets[1:] - 1
    t_fg[has] = np.exp(-incl[ends[has]])
    return np.exp(-excl), np.exp(-incl), t_fg


def composite_fwd(offsets, sigmas, deltas, colors, background):
    """Front-to-back emission-absorption. Returns (rgb, t_fg, weights)."""
    n_rays = offsets.shape[0] - 1
    t_at, t_after, t_fg = _transmittance(offsets, sigmas, deltas)
    alpha = 1.0 - np.exp(-sigmas * deltas)
    w = t_at * alpha
    counts = np.diff(offsets)
    ray_of = np.repeat(np.arange(n_rays, dtype=np.int64), counts)
    rgb = np.zeros((n_rays, 3), dtype=np.float64)
    np.add.at(rgb, ray_of, w[:, None] * colors)
    rgb += t_fg[:, None] * background[None, :]
    return rgb, t_fg, w


def composite_bwd(offsets, sigmas, deltas, colors, background, d_rgb, d_tfg):
    """Adjoint of composite_fwd. Returns (d_sigma, d_colors) per sample."""
    n_rays = offsets.shape[0] - 1
    t_at, t_after, t_fg = _transmittance(offsets, sigmas, deltas)
    alpha = 1.0 - np.exp(-sigmas * deltas)
    w = t_at * alpha
    counts = np.diff(offsets)
    ray_of = np.repeat(np.arange(n_rays, dtype=np.int64), counts)

    d_colors = w[:, None] * d_rgb[ray_of]
    g = np.einsum("sc,sc->s", d_rgb[ray_of], colors)
    wg = w * g
    total = np.zeros(n_rays, dtype=np.float64)
    np.add.at(total, ray_of, wg)
    cs = np.cumsum(wg)
    starts = offsets[:-1]
    has = counts > 0
    base = np.zeros(n_rays, dtype=np.float64)
    base[has] = cs[starts[has]] - wg[starts[has]]
    incl = cs - np.repeat(base, counts)  # sum_{j<=i} within the ray
    suffix = total[ray_of] - incl  # sum_{j>i}
    tail = t_fg * (d_rgb @ background + d_tfg)
    d_sigma = deltas * (t_after * g - suffix - tail[ray_of])
    return d_sigma, d_colors


# ---------------------------------------------------------------------------
# gradient scatter


def scatter(corner_slot, corner_w, gate, d_sigma, d_sh, out_density, out_sh):
    """Accumulate per-sample gradients into slot arrays (in place).

    gate zeroes the density gradient where the evaluated sigma sat on the
    clamp; SH gradients always flow.
    """
    gated = d_sigma * gate
    for c in range(8):
        slot = corner_slot[:, c]
        m = slot >= 0
        if not np.any(m):
            continue
        sl = slot[m].astype(np.int64)
        w = corner_w[m, c]
        np.add.at(out_density, sl, w * gated[m])
        np.add.at(out_sh, sl, w[:, None] * d_sh[m])


# ---------------------------------------------------------------------------
# total variation

def _volumes(slot_map, density, sh, res):
    nx, ny, nz = int(res[0]), int(res[1]), int(res[2])
    active = (slot_map >= 0).reshape(nx, ny, nz)
    idx = np.where(slot_map >= 0, slot_map, 0).reshape(nx, ny, nz)
    vol_d = np.where(active, density.astype(np.float64)[idx], 0.0)
    vol_sh = np.where(active[..., None], sh.astype(np.float64)[idx], 0.0)
    return active, idx, vol_d, vol_sh


def _tv_channel(vol, active, eps):
    """Stabilized TV of one scalar channel. Returns (sum, d_vol)."""
    dx = np.zeros_like(vol)
    dy = np.zeros_like(vol)
    dz = np.zeros_like(vol)
    px = active[:-1] & active[1:]
    py = active[:, :-1] & active[:, 1:]
    pz = active[:, :, :-1] & active[:, :, 1:]
    dx[:-1][px] = (vol[1:] - vol[:-1])[px]
    dy[:, :-1][py] = (vol[:, 1:] - vol[:, :-1])[py]
    dz[:, :, :-1][pz] = (vol[:, :, 1:] - vol[:, :, :-1])[pz]
    s = np.sqrt(dx * dx + dy * dy + dz * dz + eps)
    total = float(s[active].sum())
    inv = np.where(active, 1.0 / s, 0.0)
    d_vol = np.zeros_like(vol)
    gx = dx * inv
    gy = dy * inv
    gz = dz * inv
    d_vol -= gx + gy + gz
    d_vol[1:] += gx[:-1]
    d_vol[:, 1:] += gy[:, :-1]
    d_vol[:, :, 1:] += gz[:, :, :-1]
    return total, d_vol


def tv_grad(slot_map, density, sh, res, eps, scale, out_density, out_sh):
    """Stabilized total variation over active voxels, all channels.

    Returns the raw sum (caller normalizes); gradients scaled by `scale`
    are accumulated into out_density / out_sh when they are not None.
    """
    active, idx, vol_d, vol_sh = _volumes(slot_map, density, sh, res)
    want_grad = out_density is not None
    total, d_vol = _tv_channel(vol_d, active, eps)
    if want_grad:
        np.add.at(out_density, idx[active], scale * d_vol[active])
    for ch in range(sh.shape[1]):
        t, d_vol = _tv_channel(vol_sh[..., ch], active, eps)
        total += t
        if want_grad:
            np.add.at(out_sh[:, ch], idx[active], scale * d_vol[active])
    return total


__all__ = [
    "K_MAX",
    "sigmoid",
    "ray_aabb",
    "march_segments",
    "march_fill",
    "sample_field",
    "sh_basis",
    "shade",
    "shade_bwd",
    "composite_fwd",
    "composite_bwd",
    "scatter",
    "tv_grad",
]
