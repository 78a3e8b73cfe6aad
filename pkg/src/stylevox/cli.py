"""Command line entry points.

One binary, five subcommands (train, stylize, render, filter-masks,
psnr). Settings come from an optional TOML or JSON config file; command
line flags win over the file, the file wins over defaults. Exit codes:
0 success, 2 bad input or usage, 3 runtime failure (divergence, write
errors). Every command validates its inputs before writing anything.
"""

import functools
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, kernels
from .errors import (
    CheckpointError,
    ContractViolation,
    DivergenceError,
    SceneError,
)
from .grid import load_checkpoint, save_checkpoint
from .imgio import write_image
from .loss import LossWeights
from .render import Camera, render_image
from .scene import assign_styles, load_masks, load_scene, load_style_config, retention_filter
from .style import load_weights, make_test_extractor
from .train import TrainConfig, evaluate_psnr, stylize, train_photoreal

EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ContractViolation, SceneError, CheckpointError) as exc:
            _fail(EXIT_USAGE, exc)
        except FileNotFoundError as exc:
            _fail(EXIT_USAGE, exc)
        except (DivergenceError, ArithmeticError) as exc:
            _fail(EXIT_RUNTIME, exc)
        except OSError as exc:
            _fail(EXIT_RUNTIME, exc)

    return wrapper


def _load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ContractViolation(f"config file not found: {path}")
    if path.suffix.lower() == ".toml":
        try:
            return tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ContractViolation(f"config is not valid TOML: {exc}")
    if path.suffix.lower() == ".json":
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ContractViolation(f"config is not valid JSON: {exc}")
    raise ContractViolation(f"config must be .toml or .json, got {path.name}")


_CONFIG_KEYS = {
    "iterations", "batch_rays", "lr_density", "lr_sh", "optimizer", "decay",
    "step", "chunk_rays", "log_every", "background", "resolution", "sh_degree",
    "init_density", "eval_frames", "seed", "deterministic", "weights",
    "extractor", "taps",
}


def _build_train_config(section, seed=None, deterministic=None):
    unknown = set(section) - _CONFIG_KEYS
    if unknown:
        raise ContractViolation(f"unknown config keys: {', '.join(sorted(unknown))}")
    section = dict(section)
    section.pop("extractor", None)
    section.pop("taps", None)
    weights = section.pop("weights", {})
    bad = set(weights) - {"lambda_tv", "lambda_beta", "lambda_sparsity", "style_weight"}
    if bad:
        raise ContractViolation(f"unknown weight keys: {', '.join(sorted(bad))}")
    if seed is not None:
        section["seed"] = seed
    if deterministic is not None:
        section["deterministic"] = deterministic
    for key in ("background", "resolution", "eval_frames"):
        if key in section:
            section[key] = tuple(section[key])
    try:
        return TrainConfig(weights=LossWeights(**weights), **section)
    except TypeError as exc:
        raise ContractViolation(f"bad config value: {exc}")


def _build_extractor(section):
    spec = section.get("extractor", "builtin:0")
    if isinstance(spec, str) and spec.startswith("builtin"):
        _, _, seed = spec.partition(":")
        return make_test_extractor(int(seed) if seed else 0)
    taps = section.get("taps")
    return load_weights(spec, taps=taps)


def _write_run_log(out_dir, command, config, extra=None):
    doc = {
        "command": command,
        "seed": config.seed,
        "deterministic": config.deterministic,
        "kernel_backend": kernels.BACKEND_NAME,
        "version": __version__,
        "config": asdict(config),
    }
    if extra:
        doc.update(extra)
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, default=str))


def _report_logger(out_dir, name="train_log.jsonl"):
    path = out_dir / name
    handle = open(path, "w")

    def log_fn(iteration, report):
        handle.write(report.log_line(iteration) + "\n")
        handle.flush()

    return log_fn, handle


@click.group()
@click.version_option(version=__version__)
def main():
    """Sparse voxel radiance fields with per-object style transfer."""


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(), help="scene.json manifest")
@click.option("--config", "config_path", type=click.Path(), help="TOML or JSON settings")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="output directory")
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--deterministic/--no-deterministic", default=None)
@click.option("--checkpoint", "resume_path", type=click.Path(), help="resume from a checkpoint")
@_guarded
def train(scene_path, config_path, out_dir, seed, deterministic, resume_path):
    """Fit a voxel grid to the scene's training frames."""
    doc = _load_config(config_path)
    config = _build_train_config(doc.get("train", {}), seed, deterministic)
    dataset = load_scene(scene_path)
    grid = load_checkpoint(resume_path) if resume_path else None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_fn, handle = _report_logger(out)
    try:
        grid, _ = train_photoreal(
            dataset, config, grid, log_fn, checkpoint_path=out / "model.s2ck"
        )
    finally:
        handle.close()
    extra = {}
    if config.eval_frames:
        vals = evaluate_psnr(
            grid, dataset, config.eval_frames, config.step, config.background, config.chunk_rays
        )
        extra["psnr"] = {str(i): v for i, v in zip(config.eval_frames, vals)}
        click.echo(json.dumps(extra["psnr"]))
    _write_run_log(out, "train", config, extra)
    click.echo(f"checkpoint written to {out / 'model.s2ck'}")


@main.command("filter-masks")
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--masks", "masks_dir", required=True, type=click.Path())
@click.option("--threshold", type=float, default=0.8, show_default=True)
@click.option("--out", "out_path", type=click.Path(), help="also write the report here")
@_guarded
def filter_masks(scene_path, masks_dir, threshold, out_path):
    """Report which objects persist across enough frames to keep."""
    dataset = load_scene(scene_path, check_images=False)
    mask_sets = load_masks(masks_dir, dataset)
    retained, dropped = retention_filter(mask_sets, dataset.n_frames, threshold)
    report = {
        "threshold": threshold,
        "n_frames": dataset.n_frames,
        "retained": {
            ms.object_id: {
                "category": ms.category,
                "presence": ms.presence_count,
                "fraction": ms.presence_count / dataset.n_frames,
            }
            for ms in retained
        },
        "dropped": {
            ms.object_id: {
                "category": ms.category,
                "presence": ms.presence_count,
                "fraction": ms.presence_count / dataset.n_frames,
            }
            for ms in dropped
        },
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    click.echo(text)
    if out_path:
        Path(out_path).write_text(text)


def _style_preview_frames(dataset):
    n = dataset.n_frames
    return sorted({0, n // 2, n - 1})


@main.command("stylize")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--masks", "masks_dir", required=True, type=click.Path())
@click.option("--styles", "styles_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--deterministic/--no-deterministic", default=None)
@click.option("--threshold", type=float, default=0.8, show_default=True)
@_guarded
def stylize_cmd(
    checkpoint_path, scene_path, masks_dir, styles_path, config_path, out_dir,
    seed, deterministic, threshold,
):
    """Apply per-object styles to a trained grid."""
    doc = _load_config(config_path)
    section = doc.get("stylize", {})
    config = _build_train_config(section, seed, deterministic)
    extractor = _build_extractor(section)
    dataset = load_scene(scene_path)
    grid = load_checkpoint(checkpoint_path)
    mask_sets = load_masks(masks_dir, dataset)
    style_config = load_style_config(styles_path)
    retained, dropped = retention_filter(mask_sets, dataset.n_frames, threshold)
    dropped_ids = {ms.object_id for ms in dropped}
    for rule in style_config.rules:
        if rule.instance and rule.instance in dropped_ids:
            raise ContractViolation(
                f"style rule references {rule.instance!r}, which the retention filter "
                f"dropped at threshold {threshold}"
            )
    style_map = assign_styles(retained, style_config)
    if not style_map:
        raise ContractViolation("no style rule matched any retained object")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preview = _style_preview_frames(dataset)
    for idx in preview:
        image, _ = render_image(
            grid, dataset.frames[idx].camera, config.step, config.background, config.chunk_rays
        )
        write_image(out / f"before_f{idx:03d}.png", image)

    log_fn, handle = _report_logger(out, "stylize_log.jsonl")
    try:
        grid, _ = stylize(grid, dataset, retained, style_map, extractor, config, log_fn)
    finally:
        handle.close()
    save_checkpoint(grid, out / "stylized.s2ck")
    for idx in preview:
        image, _ = render_image(
            grid, dataset.frames[idx].camera, config.step, config.background, config.chunk_rays
        )
        write_image(out / f"after_f{idx:03d}.png", image)
    _write_run_log(
        out, "stylize", config,
        {"styled_objects": sorted(style_map), "preview_frames": preview},
    )
    click.echo(f"stylized checkpoint written to {out / 'stylized.s2ck'}")


def _load_pose_track(path):
    path = Path(path)
    if not path.is_file():
        raise ContractViolation(f"pose file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"pose file is not valid JSON: {exc}")
    needed = ("fx", "fy", "cx", "cy", "width", "height", "near", "far", "poses")
    missing = [k for k in needed if k not in doc]
    if missing:
        raise ContractViolation(f"pose file is missing keys: {', '.join(missing)}")
    poses = doc["poses"]
    if not isinstance(poses, list) or not poses:
        raise ContractViolation("pose file needs a non-empty 'poses' list")
    return doc, [np.asarray(p, dtype=np.float64) for p in poses]


def _interpolate_poses(poses, n_out):
    """Evenly resample a keyframe path: translations lerp, rotations slerp."""
    from scipy.spatial.transform import Rotation, Slerp

    mats = [p.reshape(3, 4) for p in poses]
    if len(mats) == 1:
        return [poses[0]] * n_out
    keys = np.arange(len(mats), dtype=np.float64)
    slerp = Slerp(keys, Rotation.from_matrix(np.stack([m[:, :3] for m in mats])))
    trans = np.stack([m[:, 3] for m in mats])
    if n_out == 1:
        qs = np.array([0.0])
    else:
        qs = np.linspace(0.0, float(len(mats) - 1), n_out)
    out = []
    for q in qs:
        r = slerp([q]).as_matrix()[0]
        t = np.array([np.interp(q, keys, trans[:, d]) for d in range(3)])
        out.append(np.concatenate([r, t[:, None]], axis=1).reshape(-1))
    return out


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--poses", "poses_path", required=True, type=click.Path(),
              help="JSON with intrinsics and 12-float camera-to-world poses")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--interpolate", "n_interp", type=int, default=0,
              help="resample the pose path to this many frames")
@click.option("--config", "config_path", type=click.Path())
@_guarded
def render(checkpoint_path, poses_path, out_dir, n_interp, config_path):
    """Render a checkpoint along a camera path."""
    doc = _load_config(config_path)
    section = doc.get("render", {})
    step = section.get("step")
    chunk = int(section.get("chunk_rays", 8192))
    background = tuple(section.get("background", (0.0, 0.0, 0.0)))
    grid = load_checkpoint(checkpoint_path)
    track, poses = _load_pose_track(poses_path)
    if n_interp < 0:
        raise ContractViolation("--interpolate must be non-negative")
    if n_interp:
        poses = _interpolate_poses(poses, n_interp)
    cameras = [
        Camera.from_flat_pose(
            track["fx"], track["fy"], track["cx"], track["cy"],
            track["width"], track["height"], p, track["near"], track["far"],
        )
        for p in poses
    ]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cameras):
        image, _ = render_image(grid, cam, step, background, chunk)
        write_image(out / f"render_{i:03d}.png", image)
    click.echo(f"wrote {len(cameras)} frames to {out}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--frames", "frames_spec", default="", help="comma-separated frame indices; default all")
@click.option("--config", "config_path", type=click.Path())
@click.option("--out", "out_path", type=click.Path())
@_guarded
def psnr(checkpoint_path, scene_path, frames_spec, config_path, out_path):
    """PSNR of checkpoint renders against scene images."""
    doc = _load_config(config_path)
    section = doc.get("render", {})
    grid = load_checkpoint(checkpoint_path)
    dataset = load_scene(scene_path)
    if frames_spec.strip():
        try:
            indices = [int(v) for v in frames_spec.split(",")]
        except ValueError:
            raise ContractViolation(f"--frames must be comma-separated integers, got {frames_spec!r}")
    else:
        indices = list(range(dataset.n_frames))
    vals = evaluate_psnr(
        grid, dataset, indices,
        section.get("step"),
        tuple(section.get("background", (0.0, 0.0, 0.0))),
        int(section.get("chunk_rays", 8192)),
    )
    report = {str(i): v for i, v in zip(indices, vals)}
    text = json.dumps(report, indent=2)
    click.echo(text)
    if out_path:
        Path(out_path).write_text(text)



if __name__ == "__main__":
    main()
