"""8-bit PNG in, linear float out, and back.

Everything numeric in the package works on float arrays in [0,1]; the
0..255 conversion happens only here. Quantization rounds half away from
the darker value (np.rint), decode divides by 255.
"""

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    """PNG -> (H,W,3) float64 in [0,1]. Alpha, palette, gray all coerced."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, image):
    """(H,W,3) float in [0,1] -> 8-bit RGB PNG. Values are clipped."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H,W,3), got {image.shape}")
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_mask(path) -> np.ndarray:
    """Mask PNG -> (H,W) bool; pixels >= 128 count as object."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def write_mask(path, mask):
    """(H,W) bool -> 0/255 grayscale PNG."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected (H,W), got {mask.shape}")
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


__all__ = ["read_image", "write_image", "read_mask", "write_mask"]
