"""PNG image I/O: 8-bit RGB images and grayscale masks."""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageDecodeError(ValueError):
    """Raised when a file cannot be decoded as an image."""


def load_image_rgb(path: str) -> np.ndarray:
    """Decode an image file to a (1, 3, h, w) float32 array in [0, 255]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[None])


def save_image_rgb(image: np.ndarray, path: str) -> None:
    """Write a (1, 3, h, w) or (3, h, w) array as an 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim == 4:
        arr = arr[0]
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_mask(path: str) -> np.ndarray:
    """Decode an 8-bit grayscale PNG into a boolean mask; >=128 means missing."""
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode mask {path}: {exc}") from exc
    return gray >= 128


def save_mask(mask: np.ndarray, path: str) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")
