"""Two-phase optimization: photometric reconstruction, then stylization.

Phase one trains on random ray batches drawn across all training frames;
phase two renders one whole view per iteration (in chunks whose sample
stencils are cached) so the matching loss sees full feature maps, then
replays the cached chunks backward. Both phases share the RMSProp-style
diagonal optimizer and abort on non-finite losses.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ContractViolation, DivergenceError
from .grid import GridGradients, VoxelGrid, save_checkpoint
from .loss import LossReport, LossWeights, rf_loss, weighted_total
from .render import composite, composite_backward, full_frame_pixels, generate_rays, march_rays
from .scene import SceneDataset
from .style import (
    FeatureExtractor,
    downsample_mask,
    extract_features_with_cache,
    features_backward,
    load_style_image,
    masked_nnfm_loss,
    prepare_style_target,
    total_style_loss,
)

OPT_EPS = 1e-8


@dataclass
class TrainConfig:
    """Knobs for one optimization phase."""

    iterations: int = 10000
    batch_rays: int = 4000
    lr_density: float = 0.3
    lr_sh: float = 0.01
    optimizer: str = "rmsprop"
    decay: float = 0.95
    weights: LossWeights = field(default_factory=LossWeights)
    step: Optional[float] = None  # march spacing; None = half a voxel edge
    seed: int = 0
    deterministic: bool = True
    chunk_rays: int = 8192
    log_every: int = 50
    background: tuple = (0.0, 0.0, 0.0)
    resolution: tuple = (64, 64, 64)
    sh_degree: int = 2
    init_density: float = 0.1
    eval_frames: tuple = ()
    masked_content: bool = False  # non-canonical: photometric term under styled masks only

    def __post_init__(self):
        if self.iterations < 0 or self.batch_rays < 1 or self.chunk_rays < 1:
            raise ContractViolation("iterations, batch_rays and chunk_rays must be positive")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if not (0.0 <= self.decay < 1.0):
            raise ContractViolation("decay must be in [0, 1)")
        if self.lr_density < 0 or self.lr_sh < 0:
            raise ContractViolation("learning rates must be non-negative")


@dataclass
class OptimState:
    """Gradient second-moment accumulators, one per parameter array."""

    acc_density: np.ndarray
    acc_sh: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, grid: VoxelGrid) -> "OptimState":
        return cls(
            acc_density=np.zeros(grid.n_active, dtype=np.float64),
            acc_sh=np.zeros((grid.n_active, 3 * grid.n_coeffs), dtype=np.float64),
        )


def apply_update(grid: VoxelGrid, grads: GridGradients, state: OptimState, config: TrainConfig):
    """One optimizer step, in place. Parameters stay float32."""
    if config.optimizer == "rmsprop":
        d = config.decay
        state.acc_density *= d
        state.acc_density += (1.0 - d) * grads.d_density**2
        state.acc_sh *= d
        state.acc_sh += (1.0 - d) * grads.d_sh**2
        step_d = grads.d_density / (np.sqrt(state.acc_density) + OPT_EPS)
        step_s = grads.d_sh / (np.sqrt(state.acc_sh) + OPT_EPS)
    else:  # plain sgd
        step_d = grads.d_density
        step_s = grads.d_sh
    grid.density = (grid.density.astype(np.float64) - config.lr_density * step_d).astype(
        np.float32
    )
    grid.sh = (grid.sh.astype(np.float64) - config.lr_sh * step_s).astype(np.float32)
    state.step_count += 1


def _training_frames(dataset: SceneDataset, config: TrainConfig):
    held = set(int(i) for i in config.eval_frames)
    for i in held:
        if i < 0 or i >= dataset.n_frames:
            raise ContractViolation(f"eval frame {i} outside the scene's {dataset.n_frames} frames")
    frames = [f for f in dataset.frames if f.index not in held]
    if not frames:
        raise ContractViolation("every frame is held out, nothing to train on")
    return frames


def _flatten_rays(dataset: SceneDataset, frames):
    """Stack origins/dirs/targets/near/far for every pixel of the frames."""
    origins, dirs, targets, nears, fars = [], [], [], [], []
    for fr in frames:
        cam = fr.camera
        o, d = generate_rays(cam, full_frame_pixels(cam))
        origins.append(o)
        dirs.append(d)
        targets.append(dataset.load_image(fr.index).reshape(-1, 3))
        nears.append(np.full(o.shape[0], cam.near))
        fars.append(np.full(o.shape[0], cam.far))
    return (
        np.concatenate(origins),
        np.concatenate(dirs),
        np.concatenate(targets),
        np.concatenate(nears),
        np.concatenate(fars),
    )


def _check_finite(report: LossReport, iteration: int):
    if not math.isfinite(report.total):
        raise DivergenceError(
            f"non-finite loss at iteration {iteration}: mse={report.mse} tv={report.tv} "
            f"sparsity={report.sparsity} beta={report.beta} style={report.style}"
        )


def train_photoreal(
    dataset: SceneDataset,
    config: TrainConfig,
    grid: Optional[VoxelGrid] = None,
    log_fn=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
):
    """Phase one: fit the grid to the training frames.

    Returns (grid, reports). reports holds one LossReport per logged
    iteration (every log_every plus the last).
    """
    rng = np.random.default_rng(config.seed)
    if grid is None:
        grid = VoxelGrid.dense(
            config.resolution,
            dataset.bbox_min,
            dataset.bbox_max,
            sh_degree=config.sh_degree,
            density=config.init_density,
            sh=0.0,
        )
    frames = _training_frames(dataset, config)
    origins, dirs, targets, nears, fars = _flatten_rays(dataset, frames)
    n_rays = origins.shape[0]
    bg = np.asarray(config.background, dtype=np.float64)

    state = OptimState.zeros(grid)
    grads = GridGradients.zeros(grid)
    reports = []
    for it in range(config.iterations):
        pick = rng.integers(0, n_rays, config.batch_rays)
        jitter = None if config.deterministic else rng
        batch = march_rays(
            grid, origins[pick], dirs[pick], nears[pick], fars[pick], config.step, jitter
        )
        out = composite(batch, bg)
        grads.clear()
        report, d_rgb, d_tfg, d_sig_extra = rf_loss(
            grid, out.rgb, targets[pick], out.t_fg, batch.sigmas, config.weights, grads
        )
        _check_finite(report, it)
        d_sigma, d_colors = composite_backward(batch, out, d_rgb, d_tfg)
        d_sigma += d_sig_extra
        d_sh = kernels.shade_bwd(batch.offsets, batch.colors, batch.basis, d_colors)
        gate = (batch.raw_sigmas > 0.0).astype(np.float64)
        kernels.scatter(
            batch.corner_slots, batch.corner_weights, gate, d_sigma, d_sh,
            grads.d_density, grads.d_sh,
        )
        apply_update(grid, grads, state, config)
        if it % config.log_every == 0 or it == config.iterations - 1:
            reports.append(report)
            if log_fn is not None:
                log_fn(it, report)
        if checkpoint_path and checkpoint_every and (it + 1) % checkpoint_every == 0:
            save_checkpoint(grid, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(grid, checkpoint_path)
    return grid, reports


# ---------------------------------------------------------------------------
# phase two


def _render_cached(grid, camera, step, bg, chunk):
    """Full-frame render keeping each chunk's sample stencil for replay."""
    pixels = full_frame_pixels(camera)
    origins, dirs = generate_rays(camera, pixels)
    chunks = []
    rgb = np.empty((pixels.shape[0], 3), dtype=np.float64)
    t_fg = np.empty(pixels.shape[0], dtype=np.float64)
    for lo in range(0, pixels.shape[0], chunk):
        hi = min(lo + chunk, pixels.shape[0])
        batch = march_rays(grid, origins[lo:hi], dirs[lo:hi], camera.near, camera.far, step)
        out = composite(batch, bg)
        rgb[lo:hi] = out.rgb
        t_fg[lo:hi] = out.t_fg
        chunks.append((lo, hi, batch, out))
    return rgb, t_fg, chunks


def _tap_masks(mask, key_base, tap_shapes, cache):
    """Downsample one view mask to every tap resolution, memoized."""
    key_masks = []
    for shape in tap_shapes:
        key = key_base + (shape,)
        if key not in cache:
            cache[key] = downsample_mask(mask, shape)
        key_masks.append(cache[key])
    return key_masks


def build_style_targets(extractor: FeatureExtractor, style_map):
    """Load and featurize each object's style image once."""
    by_path = {}
    targets = []
    for object_id, path in sorted(style_map.items()):
        key = str(path)
        if key not in by_path:
            by_path[key] = load_style_image(path)
        targets.append(
            prepare_style_target(extractor, object_id, by_path[key], style_path=key)
        )
    return targets


def stylize(
    grid: VoxelGrid,
    dataset: SceneDataset,
    mask_sets,
    style_map,
    extractor: FeatureExtractor,
    config: TrainConfig,
    log_fn=None,
):
    """Phase two: push masked regions toward their style statistics while
    the reconstruction terms hold everything else in place.

    style_map is {object_id: style image path}; every id must be present
    in mask_sets (retention runs upstream). A styled object that simply
    has no mask in the chosen view contributes nothing that iteration.

    config.masked_content restricts the photometric term to pixels under
    a styled object's mask (value and gradient; regularizers untouched).
    The default full-image term is the canonical objective; the masked
    variant trades background stability for stronger style movement.
    """
    by_id = {ms.object_id: ms for ms in mask_sets}
    missing = sorted(set(style_map) - set(by_id))
    if missing:
        raise ContractViolation(f"styled objects without masks: {', '.join(missing)}")
    if not style_map:
        raise ContractViolation("stylize needs at least one styled object")

    rng = np.random.default_rng(config.seed)
    frames = _training_frames(dataset, config)
    bg = np.asarray(config.background, dtype=np.float64)
    step = config.step if config.step is not None else float(grid.voxel_size.min()) * 0.5
    targets = build_style_targets(extractor, style_map)
    styled_ids = [t.object_id for t in targets]

    state = OptimState.zeros(grid)
    grads = GridGradients.zeros(grid)
    mask_cache = {}
    reports = []
    for it in range(config.iterations):
        fr = frames[int(rng.integers(0, len(frames)))]
        cam = fr.camera
        rgb, t_fg, chunks = _render_cached(grid, cam, step, bg, config.chunk_rays)
        image = rgb.reshape(cam.height, cam.width, 3)
        target_img = dataset.load_image(fr.index).reshape(-1, 3)

        sigmas = np.concatenate([b.sigmas for _, _, b, _ in chunks])
        grads.clear()
        report, d_rgb, d_tfg, d_sig_extra = rf_loss(
            grid, rgb, target_img, t_fg, sigmas, config.weights, grads
        )
        if config.masked_content:
            union = np.zeros(rgb.shape[0], dtype=bool)
            for oid in styled_ids:
                m = by_id[oid].mask_for(fr.index)
                if m is not None:
                    union |= m.reshape(-1)
            n_m = int(union.sum())
            if n_m:
                diff = rgb - target_img
                report.mse = float(np.sum(diff[union] ** 2) / n_m)
                d_rgb = np.where(union[:, None], 2.0 * diff / n_m, 0.0)
                report.total = weighted_total(
                    report.mse, report.tv, report.sparsity, report.beta, 0.0, config.weights
                )

        fmaps, fcache = extract_features_with_cache(extractor, image)
        tap_shapes = [m.values.shape[:2] for m in fmaps]
        view_masks = {}
        for oid in styled_ids:
            m = by_id[oid].mask_for(fr.index)
            if m is not None and np.any(m):
                view_masks[oid] = _tap_masks(m, (oid, fr.index), tap_shapes, mask_cache)
        style_val = 0.0
        d_maps = []
        for ti, fmap in enumerate(fmaps):
            masks_here = {oid: ms[ti] for oid, ms in view_masks.items()}
            val, d_vals, _ = masked_nnfm_loss(fmap, targets, masks_here)
            style_val += val / len(fmaps)
            d_maps.append(d_vals / len(fmaps))
        d_image_style = features_backward(extractor, fcache, d_maps)

        report.style = style_val
        report.total = total_style_loss(report, style_val, config.weights)
        _check_finite(report, it)

        d_rgb_total = d_rgb + config.weights.style_weight * d_image_style.reshape(-1, 3)
        sig_cursor = 0
        for lo, hi, batch, out in chunks:
            d_sigma, d_colors = composite_backward(batch, out, d_rgb_total[lo:hi], d_tfg[lo:hi])
            d_sigma += d_sig_extra[sig_cursor : sig_cursor + batch.n_samples]
            sig_cursor += batch.n_samples
            d_sh = kernels.shade_bwd(batch.offsets, batch.colors, batch.basis, d_colors)
            gate = (batch.raw_sigmas > 0.0).astype(np.float64)
            kernels.scatter(
                batch.corner_slots, batch.corner_weights, gate, d_sigma, d_sh,
                grads.d_density, grads.d_sh,
            )
        apply_update(grid, grads, state, config)
        if it % config.log_every == 0 or it == config.iterations - 1:
            reports.append(report)
            if log_fn is not None:
                log_fn(it, report)
    return grid, reports


def evaluate_psnr(
    grid: VoxelGrid,
    dataset: SceneDataset,
    frame_indices,
    step: Optional[float] = None,
    background=(0.0, 0.0, 0.0),
    chunk: int = 8192,
):
    """Render the given frames and report PSNR against their images.

    PSNR is 10 log10(1 / mse) with mse averaged over pixels and channels,
    capped at 99 dB so identical images stay finite.
    """
    from .render import render_image

    out = []
    for idx in frame_indices:
        idx = int(idx)
        if idx < 0 or idx >= dataset.n_frames:
            raise ContractViolation(f"frame {idx} outside the scene's {dataset.n_frames} frames")
        cam = dataset.frames[idx].camera
        image, _ = render_image(grid, cam, step, background, chunk)
        target = dataset.load_image(idx)
        mse = float(np.mean((image - target) ** 2))
        psnr = 99.0 if mse <= 0.0 else min(10.0 * math.log10(1.0 / mse), 99.0)
        out.append(psnr)
    return out


__all__ = [
    "TrainConfig",
    "OptimState",
    "apply_update",
    "train_photoreal",
    "stylize",
    "evaluate_psnr",
    "build_style_targets",
]
