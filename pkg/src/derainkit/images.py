"""Image array helpers: validation, 8-bit PNG I/O, quantization.

Images are numpy float arrays of shape (H, W, C) with C in {1, 3} and
intensities in [0, 1]. Files are stored as 8-bit PNG; quantization is
round(x * 255) / 255, so a save/load round trip moves any pixel by at
most half a quantization step (plus float32 rounding of the
intermediate products, a few 1e-8).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ShapeMismatchError, UndecodableImageError


def check_image(arr: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the (H, W, C) / [0, 1] contract and return the array."""
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ShapeMismatchError(
            f"{name}: expected (H, W, C) with C in {{1, 3}}, got {arr.shape}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name}: empty spatial dimensions {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"{name}: intensities outside [0, 1] (min={arr.min()}, max={arr.max()})"
        )
    return arr


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, staying in float [0, 1]."""
    return np.round(arr * 255.0) / 255.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 255.0


def save_image(path: str | Path, arr: np.ndarray) -> None:
    """Write an (H, W, C) float image as 8-bit PNG."""
    arr = np.asarray(arr)
    u8 = to_uint8(arr)
    if u8.shape[2] == 1:
        img = Image.fromarray(u8[:, :, 0], mode="L")
    else:
        img = Image.fromarray(u8, mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file into a float32 (H, W, C) array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode in ("L", "I;16", "I"):
                img = img.convert("L")
                arr = np.asarray(img, dtype=np.uint8)[:, :, None]
            else:
                img = img.convert("RGB")
                arr = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise UndecodableImageError(f"cannot decode {path}: {exc}") from exc
    return from_uint8(arr)


def verify_decodable(path: str | Path) -> None:
    """Cheap header-level integrity check; raises UndecodableImageError."""
    try:
        with Image.open(path) as img:
            img.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise UndecodableImageError(f"cannot decode {path}: {exc}") from exc


def image_size(path: str | Path) -> tuple[int, int]:
    """(height, width) without decoding pixel data."""
    with Image.open(path) as img:
        w, h = img.size
    return h, w
