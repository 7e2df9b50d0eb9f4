"""8-bit PNG/PPM images and colour-coded label masks."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import InputError

FORMATS = {".png": "PNG", ".ppm": "PPM"}
_MODES = {"1", "L", "LA", "P", "PA", "RGB", "RGBA"}


def _open(path) -> Image.Image:
    path = os.fspath(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise InputError(f"{path}: unreadable image ({exc})") from None
    if img.format not in FORMATS.values():
        raise InputError(f"{path}: unsupported image format {img.format}")
    if img.mode not in _MODES:
        raise InputError(f"{path}: unsupported pixel mode {img.mode} (8-bit only)")
    if img.width == 0 or img.height == 0:
        raise InputError(f"{path}: image has a zero dimension")
    return img


def load_image(path) -> np.ndarray:
    """``(H, W, 3)`` float image in ``[0, 1]``; any alpha channel is dropped."""
    img = _open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def _format_for(path) -> str:
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext not in FORMATS:
        raise InputError(f"{path}: unsupported image extension {ext!r} (use .png or .ppm)")
    return FORMATS[ext]


def save_image(image, path) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise InputError(f"image must be (H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InputError("image has a zero dimension")
    if not np.all(np.isfinite(arr)):
        raise InputError("image contains non-finite values")
    Image.fromarray(to_uint8(arr[..., :3]), "RGB").save(os.fspath(path), _format_for(path))


def save_label_mask(labels, colors, path) -> None:
    """Write labels (0 background, ``k+1`` for class ``k``) as a colour PNG."""
    labels = np.asarray(labels)
    palette = np.zeros((len(colors) + 1, 3))
    if len(colors):
        palette[1:] = np.asarray(colors, dtype=np.float64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > len(colors):
        raise InputError("label outside the class table")
    save_image(palette[labels], path)


def decode_label_colors(image: np.ndarray, colors, tolerance: float = 0.1) -> np.ndarray:
    """Map each pixel to the nearest class colour (Chebyshev) within ``tolerance``."""
    labels = np.zeros(image.shape[:2], np.int64)
    if not len(colors):
        return labels
    cols = np.asarray(colors, dtype=np.float64)
    dist = np.max(np.abs(image[:, :, None, :] - cols[None, None]), axis=-1)
    best = np.argmin(dist, axis=-1)
    hit = np.take_along_axis(dist, best[..., None], -1)[..., 0] <= tolerance
    labels[hit] = best[hit] + 1
    return labels


def load_label_mask(path, colors) -> np.ndarray:
    """Read a colour-coded mask written by :func:`save_label_mask`.

    Single-channel masks are accepted for convenience: any non-zero pixel is
    assigned to the first class.
    """
    img = _open(path)
    if img.mode in ("1", "L", "LA"):
        return (np.asarray(img.convert("L")) > 0).astype(np.int64)
    return decode_label_colors(np.asarray(img.convert("RGB"), np.float64) / 255.0, colors)


def load_mask(path) -> np.ndarray:
    """Boolean mask: true wherever any channel is non-zero."""
    img = _open(path).convert("RGB")
    return np.asarray(img).max(axis=2) > 0


def save_mask(mask, path) -> None:
    save_image(np.asarray(mask, dtype=np.float64), path)
