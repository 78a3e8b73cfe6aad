"""Scene manifests, per-object masks, retention filtering, style rules.

A scene is a JSON manifest next to its images; masks live in sibling
directories named by object id with an objects.json sidecar giving each
object's category. All validation problems raise SceneError subclasses
so the CLI can map them to the usage exit code.
"""

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import imgio
from .errors import (
    ContractViolation,
    DimensionMismatchError,
    ManifestError,
    MaskLayoutError,
    MissingImageError,
    PoseError,
    StyleConfigError,
)
from .render import Camera

MANIFEST_NAME = "scene.json"
OBJECTS_SIDECAR = "objects.json"
MASK_THRESHOLD = 128  # pixel values at or above this count as object


@dataclass
class FrameRecord:
    index: int
    image_path: Path
    camera: Camera


@dataclass
class SceneDataset:
    frames: list
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    root: Path

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ManifestError(f"a scene needs at least 2 frames, got {len(self.frames)}")
        w, h = self.frames[0].camera.width, self.frames[0].camera.height
        for fr in self.frames:
            if (fr.camera.width, fr.camera.height) != (w, h):
                raise DimensionMismatchError(
                    f"frame {fr.index} is {fr.camera.width}x{fr.camera.height}, "
                    f"expected {w}x{h}"
                )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].camera.width

    @property
    def height(self) -> int:
        return self.frames[0].camera.height

    def load_image(self, index: int) -> np.ndarray:
        return imgio.read_image(self.frames[index].image_path)


def _require(mapping, key, where):
    if key not in mapping:
        raise ManifestError(f"{where} is missing required key {key!r}")
    return mapping[key]


def load_scene(manifest_path, check_images: bool = True) -> SceneDataset:
    """Parse and validate a scene manifest.

    Distinct failures raise distinct errors: ManifestError for structure,
    MissingImageError / PoseError / DimensionMismatchError per frame.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        spec = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(spec, dict):
        raise ManifestError("manifest root must be an object")
    root = manifest_path.parent

    bbox = spec.get("bbox", [0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    bbox = np.asarray(bbox, dtype=np.float64)
    if bbox.shape != (6,):
        raise ManifestError(f"bbox must be 6 numbers, got shape {bbox.shape}")
    if np.any(bbox[3:] <= bbox[:3]):
        raise ManifestError("bbox max must exceed bbox min on every axis")

    raw_frames = _require(spec, "frames", "manifest")
    if not isinstance(raw_frames, list):
        raise ManifestError("frames must be a list")
    frames = []
    for i, fr in enumerate(raw_frames):
        where = f"frame {i}"
        if not isinstance(fr, dict):
            raise ManifestError(f"{where} must be an object")
        image_rel = _require(fr, "image", where)
        pose = np.asarray(_require(fr, "pose", where), dtype=np.float64)
        if pose.shape != (12,):
            raise PoseError(f"{where}: pose must be 12 floats, got shape {pose.shape}")
        if not np.all(np.isfinite(pose)):
            raise PoseError(f"{where}: pose contains non-finite values")
        try:
            camera = Camera.from_flat_pose(
                float(_require(fr, "fx", where)),
                float(_require(fr, "fy", where)),
                float(_require(fr, "cx", where)),
                float(_require(fr, "cy", where)),
                int(_require(fr, "width", where)),
                int(_require(fr, "height", where)),
                pose,
                float(_require(fr, "near", where)),
                float(_require(fr, "far", where)),
            )
        except ContractViolation as exc:
            raise PoseError(f"{where}: {exc}") from exc
        image_path = root / image_rel
        if check_images:
            if not image_path.is_file():
                raise MissingImageError(f"{where}: image not found: {image_path}")
            try:
                with Image.open(image_path) as im:
                    size = im.size
            except UnidentifiedImageError as exc:
                raise MissingImageError(f"{where}: unreadable image {image_path}: {exc}") from exc
            if size != (camera.width, camera.height):
                raise DimensionMismatchError(
                    f"{where}: file is {size[0]}x{size[1]}, manifest says "
                    f"{camera.width}x{camera.height}"
                )
        frames.append(FrameRecord(index=i, image_path=image_path, camera=camera))
    return SceneDataset(frames=frames, bbox_min=bbox[:3].copy(), bbox_max=bbox[3:].copy(), root=root)


def save_scene(dataset: SceneDataset, manifest_path):
    """Write a manifest for frames whose images are already on disk."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    frames = []
    for fr in dataset.frames:
        cam = fr.camera
        frames.append(
            {
                "image": str(fr.image_path.relative_to(root))
                if fr.image_path.is_absolute()
                else str(fr.image_path),
                "width": cam.width,
                "height": cam.height,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "pose": [float(v) for v in cam.pose34.reshape(-1)],
                "near": cam.near,
                "far": cam.far,
            }
        )
    doc = {
        "bbox": [float(v) for v in np.concatenate([dataset.bbox_min, dataset.bbox_max])],
        "frames": frames,
    }
    manifest_path.write_text(json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# masks


@dataclass
class ObjectMaskSet:
    """Per-frame masks of one object; absent frames simply have no entry."""

    object_id: str
    category: str
    masks: dict = field(default_factory=dict)  # frame index -> (H,W) bool

    @property
    def presence_count(self) -> int:
        """Frames where the object actually covers pixels."""
        return sum(1 for m in self.masks.values() if np.any(m))

    def mask_for(self, frame: int):
        return self.masks.get(frame)


def load_masks(masks_dir, dataset: SceneDataset):
    """Read every object's mask stack; returns ObjectMaskSets sorted by id.

    Layout: masks_dir/objects.json maps object id to category label and
    masks_dir/<object_id>/<frame>.png holds the per-frame bitmaps. A
    directory without a sidecar entry, a sidecar entry without a
    directory, a bad frame number, or a size mismatch each fail loudly.
    """
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        raise MaskLayoutError(f"mask directory not found: {masks_dir}")
    sidecar = masks_dir / OBJECTS_SIDECAR
    if not sidecar.is_file():
        raise MaskLayoutError(f"missing sidecar {sidecar}")
    try:
        categories = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise MaskLayoutError(f"objects.json is not valid JSON: {exc}") from exc
    if not isinstance(categories, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in categories.items()
    ):
        raise MaskLayoutError("objects.json must map object ids to category strings")

    subdirs = {p.name: p for p in masks_dir.iterdir() if p.is_dir()}
    unknown = sorted(set(subdirs) - set(categories))
    if unknown:
        raise MaskLayoutError(f"mask directories without sidecar entry: {', '.join(unknown)}")
    missing = sorted(set(categories) - set(subdirs))
    if missing:
        raise MaskLayoutError(f"sidecar lists objects without mask directories: {', '.join(missing)}")

    out = []
    for object_id in sorted(categories):
        masks = {}
        for png in sorted(subdirs[object_id].glob("*.png")):
            try:
                frame = int(png.stem)
            except ValueError:
                raise MaskLayoutError(f"{png}: file name is not a frame number")
            if frame < 0 or frame >= dataset.n_frames:
                raise MaskLayoutError(
                    f"{png}: frame {frame} outside the scene's {dataset.n_frames} frames"
                )
            mask = imgio.read_mask(png)
            if mask.shape != (dataset.height, dataset.width):
                raise DimensionMismatchError(
                    f"{png}: mask is {mask.shape[1]}x{mask.shape[0]}, frames are "
                    f"{dataset.width}x{dataset.height}"
                )
            masks[frame] = mask
        out.append(ObjectMaskSet(object_id=object_id, category=categories[object_id], masks=masks))
    return out


def save_masks(mask_sets, masks_dir):
    """Inverse of load_masks; writes bitmaps and the sidecar."""
    masks_dir = Path(masks_dir)
    masks_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {ms.object_id: ms.category for ms in mask_sets}
    (masks_dir / OBJECTS_SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    for ms in mask_sets:
        d = masks_dir / ms.object_id
        d.mkdir(exist_ok=True)
        for frame, mask in sorted(ms.masks.items()):
            imgio.write_mask(d / f"{frame:05d}.png", mask)


def retention_filter(mask_sets, n_frames: int, threshold: float = 0.8):
    """Split objects by presence: retained iff the object shows up in at
    least threshold * n_frames frames. Returns (retained, dropped)."""
    if not (0.0 < threshold <= 1.0):
        raise ContractViolation(f"threshold must be in (0, 1], got {threshold}")
    if n_frames <= 0:
        raise ContractViolation("n_frames must be positive")
    cut = threshold * n_frames
    retained = [ms for ms in mask_sets if ms.presence_count >= cut]
    dropped = [ms for ms in mask_sets if ms.presence_count < cut]
    return retained, dropped


# ---------------------------------------------------------------------------
# style rules


@dataclass
class StyleRule:
    style: str  # path to the style image
    instance: str = ""
    category: str = ""

    @property
    def selector(self) -> str:
        return f"instance {self.instance!r}" if self.instance else f"category {self.category!r}"


@dataclass
class StyleConfig:
    rules: list
    root: Path = field(default_factory=Path)

    def style_path(self, rule: StyleRule) -> Path:
        return self.root / rule.style


def load_style_config(path) -> StyleConfig:
    """Parse a style rule file (.toml or .json).

    Every rule names exactly one selector plus an existing style image;
    duplicate selectors are rejected here so binding stays unambiguous.
    """
    path = Path(path)
    if not path.is_file():
        raise StyleConfigError(f"style config not found: {path}")
    if path.suffix.lower() == ".toml":
        try:
            doc = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise StyleConfigError(f"style config is not valid TOML: {exc}") from exc
    elif path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise StyleConfigError(f"style config is not valid JSON: {exc}") from exc
    else:
        raise StyleConfigError(f"style config must be .toml or .json, got {path.name}")
    if not isinstance(doc, dict) or "rules" not in doc or not isinstance(doc["rules"], list):
        raise StyleConfigError("style config must contain a list under 'rules'")

    rules = []
    seen_instances = set()
    seen_categories = set()
    for i, raw in enumerate(doc["rules"]):
        if not isinstance(raw, dict):
            raise StyleConfigError(f"rule {i} must be a table/object")
        instance = raw.get("instance", "")
        category = raw.get("category", "")
        style = raw.get("style", "")
        if bool(instance) == bool(category):
            raise StyleConfigError(f"rule {i} must set exactly one of instance/category")
        if not style:
            raise StyleConfigError(f"rule {i} is missing a style image path")
        if instance:
            if instance in seen_instances:
                raise StyleConfigError(f"two instance rules target {instance!r}")
            seen_instances.add(instance)
        else:
            if category in seen_categories:
                raise StyleConfigError(f"two category rules target {category!r}")
            seen_categories.add(category)
        if not (path.parent / style).is_file():
            raise StyleConfigError(f"rule {i}: style image not found: {path.parent / style}")
        rules.append(StyleRule(style=style, instance=instance, category=category))
    return StyleConfig(rules=rules, root=path.parent)


def assign_styles(mask_sets, config: StyleConfig):
    """Bind style images to objects; instance rules override category ones.

    Returns {object_id: style image path}. An instance rule naming an
    object that is not in mask_sets is an error (the CLI runs this after
    retention, which is how dropped objects get refused).
    """
    by_id = {ms.object_id: ms for ms in mask_sets}
    assigned = {}
    for rule in config.rules:
        if not rule.instance:
            for ms in mask_sets:
                if ms.category == rule.category:
                    assigned.setdefault(ms.object_id, config.style_path(rule))
    for rule in config.rules:
        if rule.instance:
            if rule.instance not in by_id:
                raise StyleConfigError(
                    f"style rule references unknown or dropped object {rule.instance!r}"
                )
            assigned[rule.instance] = config.style_path(rule)
    return assigned


__all__ = [
    "FrameRecord",
    "SceneDataset",
    "ObjectMaskSet",
    "StyleRule",
    "StyleConfig",
    "load_scene",
    "save_scene",
    "load_masks",
    "save_masks",
    "retention_filter",
    "load_style_config",
    "assign_styles",
    "MANIFEST_NAME",
    "OBJECTS_SIDECAR",
]
