"""Image file IO: 8-bit RGB PNG/PPM in, PNG out."""

from __future__ import annotations

import numpy as np
from PIL import Image


class ImageIOError(ValueError):
    """Unreadable or unsupported image file."""


def read_image(path: str) -> np.ndarray:
    """Load an image file as an (H, W, 3) uint8 RGB array."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path!r}: {exc}") from None


def write_png(image: np.ndarray, path: str) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ImageIOError(f"expected an (H, W, 3) uint8 array, got {arr.shape} {arr.dtype}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
