"""Image file handling.

Pixels are float64 in [0,1] everywhere past the decoder; 0..255 lives
only in the PNG codec. Mask PNGs follow the downstream convention:
8-bit grayscale, >= 128 counts as inside the object. Writes go through
a temp file and an atomic rename so a crashed run never leaves a
half-written artifact behind.
"""

import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractViolation

FRAME_SUFFIXES = {".png", ".jpg", ".jpeg"}


def read_image(path) -> np.ndarray:
    """Image file -> (H,W,3) float64 in [0,1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise ContractViolation(f"image not found: {path}")
    except UnidentifiedImageError:
        raise ContractViolation(f"image unreadable: {path}")
    return arr / 255.0


def write_mask(path, mask) -> None:
    """(H,W) bool -> 0/255 grayscale PNG, written atomically."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractViolation(f"mask must be (H,W), got {mask.shape}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def write_bytes(path, payload: bytes) -> None:
    """Atomic binary write; same temp-and-rename dance as the masks."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def list_frames(images_dir) -> list:
    """Frame files in name order; the position in this list is the frame
    index the emitted masks use, so it must match the scene manifest's
    frame order (generators number their files for exactly this reason)."""
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise ContractViolation(f"image directory not found: {images_dir}")
    frames = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not frames:
        raise ContractViolation(f"no frame images in {images_dir}")
    return frames


__all__ = ["read_image", "write_mask", "write_bytes", "list_frames", "FRAME_SUFFIXES"]
