# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the NumPy kernels in npk.py.

Semantics are defined over there; this file only restates them as tight
sequential loops. Accumulation order per array is fixed (sample-major,
corner-minor), so repeated runs are bitwise reproducible.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, floor, log, sqrt

cnp.import_array()

K_MAX = 9

cdef double _C0 = 0.28209479177387814
cdef double _C1 = 0.4886025119029199
cdef double _C2_0 = 1.0925484305920792
cdef double _C2_1 = -1.0925484305920792
cdef double _C2_2 = 0.31539156525252005
cdef double _C2_3 = -1.0925484305920792
cdef double _C2_4 = 0.5462742152960396

cdef double _INF = float("inf")


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# ray marching


def ray_aabb(origins, dirs, bbox_min, bbox_max, near, far):
    cdef const double[:, ::1] o = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const double[::1] bmin = np.ascontiguousarray(bbox_min, dtype=np.float64)
    cdef const double[::1] bmax = np.ascontiguousarray(bbox_max, dtype=np.float64)
    cdef Py_ssize_t n = o.shape[0]
    near_a = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,))
    far_a = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,))
    cdef const double[:] nr = np.ascontiguousarray(near_a)
    cdef const double[:] fr = np.ascontiguousarray(far_a)
    t_entry = np.empty(n, dtype=np.float64)
    t_exit = np.empty(n, dtype=np.float64)
    cdef double[::1] te = t_entry
    cdef double[::1] tx = t_exit
    cdef Py_ssize_t i, ax
    cdef double lo, hi, t0, t1, inv
    for i in range(n):
        t0 = nr[i]
        t1 = fr[i]
        for ax in range(3):
            if d[i, ax] == 0.0:
                if o[i, ax] < bmin[ax] or o[i, ax] > bmax[ax]:
                    t0 = _INF
                    t1 = -_INF
                continue
            inv = 1.0 / d[i, ax]
            lo = (bmin[ax] - o[i, ax]) * inv
            hi = (bmax[ax] - o[i, ax]) * inv
            if lo > hi:
                lo, hi = hi, lo
            if lo > t0:
                t0 = lo
            if hi < t1:
                t1 = hi
        te[i] = t0
        tx[i] = t1
    return t_entry, t_exit


def march_segments(t_entry, t_exit, double step):
    if step <= 0.0:
        raise ValueError("march step must be positive")
    cdef const double[::1] te = np.ascontiguousarray(t_entry, dtype=np.float64)
    cdef const double[::1] tx = np.ascontiguousarray(t_exit, dtype=np.float64)
    cdef Py_ssize_t n = te.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    cdef long long[::1] c = counts
    cdef long long[::1] off = offsets
    cdef Py_ssize_t i
    cdef double span
    for i in range(n):
        span = tx[i] - te[i]
        if span > 0.0:
            c[i] = <long long> ceil(span / step)
        off[i + 1] = off[i] + c[i]
    return counts, offsets


def march_fill(counts, offsets, t_entry, t_exit, double step, u=None):
    cdef const long long[::1] c = np.ascontiguousarray(counts, dtype=np.int64)
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] te = np.ascontiguousarray(t_entry, dtype=np.float64)
    cdef const double[::1] tx = np.ascontiguousarray(t_exit, dtype=np.float64)
    cdef Py_ssize_t total = off[off.shape[0] - 1]
    cdef bint has_u = u is not None
    cdef const double[::1] uv
    if has_u:
        uv = np.ascontiguousarray(u, dtype=np.float64)
    ts = np.empty(total, dtype=np.float64)
    deltas = np.empty(total, dtype=np.float64)
    ray_of = np.empty(total, dtype=np.int64)
    cdef double[::1] t_out = ts
    cdef double[::1] d_out = deltas
    cdef long long[::1] r_out = ray_of
    cdef Py_ssize_t r, k, s
    cdef double span, width, frac
    for r in range(c.shape[0]):
        span = tx[r] - te[r]
        for k in range(c[r]):
            s = off[r] + k
            if k == c[r] - 1:
                width = span - (c[r] - 1) * step
            else:
                width = step
            frac = uv[s] if has_u else 0.5
            t_out[s] = te[r] + k * step + frac * width
            d_out[s] = width
            r_out[s] = r
    return ts, deltas, ray_of


# ---------------------------------------------------------------------------
# field sampling


def sample_field(positions, slot_map, density, sh, bbox_min, bbox_max, res):
    cdef const double[:, ::1] pos = np.ascontiguousarray(positions, dtype=np.float64)
    cdef const int[::1] smap = np.ascontiguousarray(slot_map, dtype=np.int32)
    cdef const float[::1] dens = np.ascontiguousarray(density, dtype=np.float32)
    cdef const float[:, ::1] shv = np.ascontiguousarray(sh, dtype=np.float32)
    cdef const double[::1] bmin = np.ascontiguousarray(bbox_min, dtype=np.float64)
    cdef const double[::1] bmax = np.ascontiguousarray(bbox_max, dtype=np.float64)
    res_a = np.asarray(res, dtype=np.int64)
    cdef long long nx = res_a[0], ny = res_a[1], nz = res_a[2]
    cdef Py_ssize_t s_count = pos.shape[0]
    cdef Py_ssize_t kk = shv.shape[1]

    raw_sigma = np.zeros(s_count, dtype=np.float64)
    sh_s = np.zeros((s_count, kk), dtype=np.float64)
    corner_slot = np.full((s_count, 8), -1, dtype=np.int32)
    corner_lattice = np.full((s_count, 8), -1, dtype=np.int64)
    corner_w = np.zeros((s_count, 8), dtype=np.float64)
    cdef double[::1] rs = raw_sigma
    cdef double[:, ::1] ss = sh_s
    cdef int[:, ::1] cs = corner_slot
    cdef long long[:, ::1] cl = corner_lattice
    cdef double[:, ::1] cw = corner_w

    cdef double inv0 = nx / (bmax[0] - bmin[0])
    cdef double inv1 = ny / (bmax[1] - bmin[1])
    cdef double inv2 = nz / (bmax[2] - bmin[2])
    cdef Py_ssize_t i, c, ch
    cdef double gx, gy, gz, fx, fy, fz, w
    cdef long long ix0, iy0, iz0, ix, iy, iz, lat
    cdef int bx, by, bz, slot
    for i in range(s_count):
        if (pos[i, 0] < bmin[0] or pos[i, 0] > bmax[0]
                or pos[i, 1] < bmin[1] or pos[i, 1] > bmax[1]
                or pos[i, 2] < bmin[2] or pos[i, 2] > bmax[2]):
            continue
        gx = (pos[i, 0] - bmin[0]) * inv0 - 0.5
        gy = (pos[i, 1] - bmin[1]) * inv1 - 0.5
        gz = (pos[i, 2] - bmin[2]) * inv2 - 0.5
        ix0 = <long long> floor(gx)
        iy0 = <long long> floor(gy)
        iz0 = <long long> floor(gz)
        fx = gx - ix0
        fy = gy - iy0
        fz = gz - iz0
        for c in range(8):
            bx = (c >> 2) & 1
            by = (c >> 1) & 1
            bz = c & 1
            ix = ix0 + bx
            iy = iy0 + by
            iz = iz0 + bz
            w = (fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy) * (fz if bz else 1.0 - fz)
            cw[i, c] = w
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                lat = (ix * ny + iy) * nz + iz
                cl[i, c] = lat
                slot = smap[lat]
                cs[i, c] = slot
                if slot >= 0:
                    rs[i] += w * dens[slot]
                    for ch in range(kk):
                        ss[i, ch] += w * shv[slot, ch]
    return raw_sigma, sh_s, corner_slot, corner_lattice, corner_w


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, int degree):
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0]
    cdef Py_ssize_t kk = (degree + 1) * (degree + 1)
    out = np.empty((n, kk), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i
    cdef double x, y, z
    for i in range(n):
        o[i, 0] = _C0
        if degree >= 1:
            x = d[i, 0]
            y = d[i, 1]
            z = d[i, 2]
            o[i, 1] = -_C1 * y
            o[i, 2] = _C1 * z
            o[i, 3] = -_C1 * x
            if degree >= 2:
                o[i, 4] = _C2_0 * x * y
                o[i, 5] = _C2_1 * y * z
                o[i, 6] = _C2_2 * (2.0 * z * z - x * x - y * y)
                o[i, 7] = _C2_3 * x * z
                o[i, 8] = _C2_4 * (x * x - y * y)
    return out


def shade(offsets, sh_s, basis):
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[:, ::1] ss = np.ascontiguousarray(sh_s, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(basis, dtype=np.float64)
    cdef Py_ssize_t kk = b.shape[1]
    colors = np.empty((ss.shape[0], 3), dtype=np.float64)
    cdef double[:, ::1] col = colors
    cdef Py_ssize_t r, s, ch, k
    cdef double acc
    for r in range(off.shape[0] - 1):
        for s in range(off[r], off[r + 1]):
            for ch in range(3):
                acc = 0.0
                for k in range(kk):
                    acc += ss[s, ch * kk + k] * b[r, k]
                col[s, ch] = _sigmoid(acc)
    return colors


def shade_bwd(offsets, colors, basis, d_colors):
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(basis, dtype=np.float64)
    cdef const double[:, ::1] dc = np.ascontiguousarray(d_colors, dtype=np.float64)
    cdef Py_ssize_t kk = b.shape[1]
    d_sh = np.empty((col.shape[0], 3 * kk), dtype=np.float64)
    cdef double[:, ::1] ds = d_sh
    cdef Py_ssize_t r, s, ch, k
    cdef double draw
    for r in range(off.shape[0] - 1):
        for s in range(off[r], off[r + 1]):
            for ch in range(3):
                draw = dc[s, ch] * col[s, ch] * (1.0 - col[s, ch])
                for k in range(kk):
                    ds[s, ch * kk + k] = draw * b[r, k]
    return d_sh


# ---------------------------------------------------------------------------
# compositing


def composite_fwd(offsets, sigmas, deltas, colors, background):
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] sig = np.ascontiguousarray(sigmas, dtype=np.float64)
    cdef const double[::1] del_ = np.ascontiguousarray(deltas, dtype=np.float64)
    cdef const double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64)
    cdef const double[::1] bg = np.ascontiguousarray(background, dtype=np.float64)
    cdef Py_ssize_t n_rays = off.shape[0] - 1
    rgb = np.zeros((n_rays, 3), dtype=np.float64)
    t_fg = np.ones(n_rays, dtype=np.float64)
    weights = np.empty(sig.shape[0], dtype=np.float64)
    cdef double[:, ::1] out = rgb
    cdef double[::1] tf = t_fg
    cdef double[::1] w = weights
    cdef Py_ssize_t r, s, ch
    cdef double t, e, wi
    for r in range(n_rays):
        t = 1.0
        for s in range(off[r], off[r + 1]):
            e = exp(-sig[s] * del_[s])
            wi = t * (1.0 - e)
            w[s] = wi
            for ch in range(3):
                out[r, ch] += wi * col[s, ch]
            t *= e
        tf[r] = t
        for ch in range(3):
            out[r, ch] += t * bg[ch]
    return rgb, t_fg, weights


def composite_bwd(offsets, sigmas, deltas, colors, background, d_rgb, d_tfg):
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] sig = np.ascontiguousarray(sigmas, dtype=np.float64)
    cdef const double[::1] del_ = np.ascontiguousarray(deltas, dtype=np.float64)
    cdef const double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64)
    cdef const double[::1] bg = np.ascontiguousarray(background, dtype=np.float64)
    cdef const double[:, ::1] dr = np.ascontiguousarray(d_rgb, dtype=np.float64)
    cdef const double[::1] dt = np.ascontiguousarray(d_tfg, dtype=np.float64)
    cdef Py_ssize_t n_rays = off.shape[0] - 1
    cdef Py_ssize_t n_s = sig.shape[0]
    d_sigma = np.empty(n_s, dtype=np.float64)
    d_colors = np.empty((n_s, 3), dtype=np.float64)
    t_buf = np.empty(n_s, dtype=np.float64)
    cdef double[::1] dsig = d_sigma
    cdef double[:, ::1] dcol = d_colors
    cdef double[::1] tb = t_buf
    cdef Py_ssize_t r, s, ch
    cdef double t, e, wi, g, suffix, bg_dot
    for r in range(n_rays):
        t = 1.0
        for s in range(off[r], off[r + 1]):
            tb[s] = t
            e = exp(-sig[s] * del_[s])
            wi = t * (1.0 - e)
            for ch in range(3):
                dcol[s, ch] = wi * dr[r, ch]
            t *= e
        bg_dot = 0.0
        for ch in range(3):
            bg_dot += dr[r, ch] * bg[ch]
        # t is now the residual transmittance of ray r; suffix starts with
        # the background tail and grows the sum_{j>i} w_j g_j term walking back
        suffix = t * (bg_dot + dt[r])
        for s in range(off[r + 1] - 1, off[r] - 1, -1):
            e = exp(-sig[s] * del_[s])
            wi = tb[s] * (1.0 - e)
            g = 0.0
            for ch in range(3):
                g += dr[r, ch] * col[s, ch]
            dsig[s] = del_[s] * (tb[s] * e * g - suffix)
            suffix += wi * g
    return d_sigma, d_colors


# ---------------------------------------------------------------------------
# gradient scatter


def scatter(corner_slot, corner_w, gate, d_sigma, d_sh, out_density, out_sh):
    cdef const int[:, ::1] cs = np.ascontiguousarray(corner_slot, dtype=np.int32)
    cdef const double[:, ::1] cw = np.ascontiguousarray(corner_w, dtype=np.float64)
    cdef const double[::1] gt = np.ascontiguousarray(gate, dtype=np.float64)
    cdef const double[::1] dsig = np.ascontiguousarray(d_sigma, dtype=np.float64)
    cdef const double[:, ::1] dsh = np.ascontiguousarray(d_sh, dtype=np.float64)
    cdef double[::1] od = out_density
    cdef double[:, ::1] osh = out_sh
    cdef Py_ssize_t kk = dsh.shape[1]
    cdef Py_ssize_t i, c, ch
    cdef int slot
    cdef double w, gated
    for i in range(cs.shape[0]):
        gated = dsig[i] * gt[i]
        for c in range(8):
            slot = cs[i, c]
            if slot < 0:
                continue
            w = cw[i, c]
            od[slot] += w * gated
            for ch in range(kk):
                osh[slot, ch] += w * dsh[i, ch]


# ---------------------------------------------------------------------------
# total variation


def tv_grad(slot_map, density, sh, res, double eps, double scale, out_density, out_sh):
    cdef const int[::1] smap = np.ascontiguousarray(slot_map, dtype=np.int32)
    cdef const float[::1] dens = np.ascontiguousarray(density, dtype=np.float32)
    cdef const float[:, ::1] shv = np.ascontiguousarray(sh, dtype=np.float32)
    res_a = np.asarray(res, dtype=np.int64)
    cdef long long nx = res_a[0], ny = res_a[1], nz = res_a[2]
    cdef Py_ssize_t kk = shv.shape[1]
    cdef bint want_grad = out_density is not None
    cdef double[::1] od
    cdef double[:, ::1] osh
    if want_grad:
        od = out_density
        osh = out_sh

    cdef double total = 0.0
    cdef Py_ssize_t ix, iy, iz, ch
    cdef long long lat, lx, ly, lz
    cdef int slot, sx, sy, sz
    cdef double v, dx, dy, dz, s_d, inv, gx, gy, gz
    # channel -1 is density, 0..kk-1 the SH channels
    cdef Py_ssize_t chan
    for chan in range(-1, <Py_ssize_t> kk):
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    lat = (ix * ny + iy) * nz + iz
                    slot = smap[lat]
                    if slot < 0:
                        continue
                    v = dens[slot] if chan < 0 else shv[slot, chan]
                    dx = 0.0
                    dy = 0.0
                    dz = 0.0
                    sx = -1
                    sy = -1
                    sz = -1
                    if ix + 1 < nx:
                        sx = smap[lat + ny * nz]
                        if sx >= 0:
                            dx = (dens[sx] if chan < 0 else shv[sx, chan]) - v
                    if iy + 1 < ny:
                        sy = smap[lat + nz]
                        if sy >= 0:
                            dy = (dens[sy] if chan < 0 else shv[sy, chan]) - v
                    if iz + 1 < nz:
                        sz = smap[lat + 1]
                        if sz >= 0:
                            dz = (dens[sz] if chan < 0 else shv[sz, chan]) - v
                    s_d = sqrt(dx * dx + dy * dy + dz * dz + eps)
                    total += s_d
                    if not want_grad:
                        continue
                    inv = scale / s_d
                    gx = dx * inv
                    gy = dy * inv
                    gz = dz * inv
                    if chan < 0:
                        od[slot] -= gx + gy + gz
                        if sx >= 0:
                            od[sx] += gx
                        if sy >= 0:
                            od[sy] += gy
                        if sz >= 0:
                            od[sz] += gz
                    else:
                        osh[slot, chan] -= gx + gy + gz
                        if sx >= 0:
                            osh[sx, chan] += gx
                        if sy >= 0:
                            osh[sy, chan] += gy
                        if sz >= 0:
                            osh[sz, chan] += gz
    return total
