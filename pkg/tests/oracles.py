"""Independent reference implementations used to freeze expected values.

Everything here is written as plain scalar loops or one-line math, on
purpose: no shared code with the package, so a bug has to be made twice
in two different shapes before a test can miss it.
"""

import math

import numpy as np


def sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def composite_scalar(sigmas, deltas, colors, background):
    """Front-to-back emission-absorption for one ray, plain loop.

    Returns (rgb, t_fg, weights).
    """
    t = 1.0
    rgb = [0.0, 0.0, 0.0]
    weights = []
    for sigma, delta, color in zip(sigmas, deltas, colors):
        alpha = 1.0 - math.exp(-sigma * delta)
        w = t * alpha
        weights.append(w)
        for ch in range(3):
            rgb[ch] += w * color[ch]
        t *= math.exp(-sigma * delta)
    for ch in range(3):
        rgb[ch] += t * background[ch]
    return np.array(rgb), t, np.array(weights)


def trilinear_scalar(values, point):
    """8-term trilinear blend on a dense value lattice.

    values maps (ix, iy, iz) -> scalar or array; missing keys count as
    zero. point is in continuous lattice coordinates (voxel centers at
    integers).
    """
    base = [math.floor(c) for c in point]
    frac = [point[a] - base[a] for a in range(3)]
    out = None
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                w = (
                    (frac[0] if bx else 1 - frac[0])
                    * (frac[1] if by else 1 - frac[1])
                    * (frac[2] if bz else 1 - frac[2])
                )
                v = values.get((base[0] + bx, base[1] + by, base[2] + bz))
                if v is None:
                    continue
                term = w * np.asarray(v, dtype=np.float64)
                out = term if out is None else out + term
    return out if out is not None else 0.0


def sh_basis_scalar(direction, degree):
    """Real SH basis values from the standard table, independently typed."""
    x, y, z = direction
    out = [0.5 * math.sqrt(1.0 / math.pi)]
    if degree >= 1:
        c1 = math.sqrt(3.0 / (4.0 * math.pi))
        out += [-c1 * y, c1 * z, -c1 * x]
    if degree >= 2:
        out += [
            0.5 * math.sqrt(15.0 / math.pi) * x * y,
            -0.5 * math.sqrt(15.0 / math.pi) * y * z,
            0.25 * math.sqrt(5.0 / math.pi) * (2 * z * z - x * x - y * y),
            -0.5 * math.sqrt(15.0 / math.pi) * x * z,
            0.25 * math.sqrt(15.0 / math.pi) * (x * x - y * y),
        ]
    return np.array(out)


def ray_aabb_scalar(origin, direction, bmin, bmax, near, far):
    """Slab test for one ray; returns (t_entry, t_exit)."""
    t0, t1 = near, far
    for ax in range(3):
        if direction[ax] == 0.0:
            if origin[ax] < bmin[ax] or origin[ax] > bmax[ax]:
                return math.inf, -math.inf
            continue
        a = (bmin[ax] - origin[ax]) / direction[ax]
        b = (bmax[ax] - origin[ax]) / direction[ax]
        lo, hi = min(a, b), max(a, b)
        t0 = max(t0, lo)
        t1 = min(t1, hi)
    return t0, t1


def mse_scalar(pred, target):
    total = 0.0
    for p, t in zip(pred, target):
        for ch in range(3):
            total += (p[ch] - t[ch]) ** 2
    return total / len(pred)


def tv_scalar(density_vol, sh_vol, active, eps=1e-8):
    """Triple-loop stabilized TV over active voxels, density + SH channels,
    already divided by the active count."""
    nx, ny, nz = active.shape
    channels = [density_vol] + [sh_vol[..., k] for k in range(sh_vol.shape[-1])]
    total = 0.0
    for vol in channels:
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    if not active[ix, iy, iz]:
                        continue
                    acc = eps
                    if ix + 1 < nx and active[ix + 1, iy, iz]:
                        acc += (vol[ix + 1, iy, iz] - vol[ix, iy, iz]) ** 2
                    if iy + 1 < ny and active[ix, iy + 1, iz]:
                        acc += (vol[ix, iy + 1, iz] - vol[ix, iy, iz]) ** 2
                    if iz + 1 < nz and active[ix, iy, iz + 1]:
                        acc += (vol[ix, iy, iz + 1] - vol[ix, iy, iz]) ** 2
                    total += math.sqrt(acc)
    return total / active.sum()


def sparsity_scalar(sigmas):
    return sum(math.log(1.0 + 2.0 * s * s) for s in sigmas)


def beta_scalar(t_values, eps=1e-5):
    total = 0.0
    for t in t_values:
        tc = min(max(t, eps), 1.0 - eps)
        total += math.log(tc) + math.log(1.0 - tc)
    return total


def psnr_scalar(a, b):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return 99.0
    return min(10.0 * math.log10(1.0 / mse), 99.0)


def cosine_distance_scalar(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        return 1.0
    dot = sum(x * y for x, y in zip(a, b))
    return 1.0 - dot / (na * nb)


def nnfm_brute(f_r, f_s):
    """O(N*M) nearest-neighbor matching: every pair is scored. The style
    side is vectorized for speed but follows cosine_distance_scalar exactly
    (zero norms give distance 1). Ties go to the smallest style linear
    index: np.argmin keeps the first minimum. Returns (mean loss, argmins)."""
    hr, wr, c = f_r.shape
    flat_r = np.asarray(f_r, dtype=np.float64).reshape(-1, c)
    flat_s = np.asarray(f_s, dtype=np.float64).reshape(-1, c)
    norm_s = np.sqrt((flat_s * flat_s).sum(axis=1))
    best_idx = np.empty(flat_r.shape[0], dtype=np.int64)
    dists = np.empty(flat_r.shape[0])
    for i, row in enumerate(flat_r):
        denom = math.sqrt(float(row @ row)) * norm_s
        d = np.where(denom > 0.0, 1.0 - (flat_s @ row) / np.where(denom > 0.0, denom, 1.0), 1.0)
        j = int(np.argmin(d))
        best_idx[i] = j
        dists[i] = d[j]
    return float(dists.mean()), best_idx


def masked_nnfm_brute(f_r, style_maps, masks):
    """Per-object masked matching: unnormalized per-object sums averaged
    over objects. style_maps and masks are parallel lists; masks are 2-D
    bool at the feature resolution."""
    h, w, c = f_r.shape
    flat_r = f_r.reshape(-1, c)
    per_object = []
    for f_s, mask in zip(style_maps, masks):
        flat_s = f_s.reshape(-1, c)
        rho = 0.0
        for i in np.flatnonzero(np.asarray(mask).reshape(-1)):
            best = min(cosine_distance_scalar(flat_r[i], srow) for srow in flat_s)
            rho += best
        per_object.append(rho)
    return sum(per_object) / len(per_object), per_object


def downsample_mask_brute(mask, th, tw):
    """Block-coverage downsample by explicit block loops."""
    h, w = mask.shape
    out = np.zeros((th, tw), dtype=bool)
    for r in range(th):
        for c in range(tw):
            r0, r1 = r * h // th, (r + 1) * h // th
            c0, c1 = c * w // tw, (c + 1) * w // tw
            block = mask[r0:r1, c0:c1]
            out[r, c] = block.sum() * 2 >= block.size
    return out


def conv2d_scalar(image, weight, bias, stride, pad):
    """Direct convolution: image (H,W,Cin), weight (Cout,Cin,kh,kw)."""
    h, w, cin = image.shape
    cout, _, kh, kw = weight.shape
    padded = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    padded[pad : pad + h, pad : pad + w] = image
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            patch = padded[i * stride : i * stride + kh, j * stride : j * stride + kw]
            for o in range(cout):
                out[i, j, o] = np.sum(patch * weight[o].transpose(1, 2, 0)) + bias[o]
    return out


def avgpool_scalar(image, k):
    h, w, c = image.shape
    oh, ow = h // k, w // k
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            out[i, j] = image[i * k : (i + 1) * k, j * k : (j + 1) * k].mean(axis=(0, 1))
    return out


def retention_brute(presence_counts, n_frames, threshold):
    """One-line counting rule: keep iff presence >= threshold * n_frames."""
    return [i for i, p in enumerate(presence_counts) if p >= threshold * n_frames]
