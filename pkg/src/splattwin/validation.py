"""Argument checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .errors import InputError
from .gaussians import Camera
from .optimizer import View


def check_image(image, shape=None, name: str = "image") -> np.ndarray:
    """Float64 ``(H, W, 3)`` array with finite values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if shape is not None and img.shape[:2] != tuple(shape):
        raise InputError(f"{name} is {img.shape[:2]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise InputError(f"{name} must hold finite values in [0, 1]")
    return img


def check_label_mask(mask, shape=None, n_classes: int | None = None,
                     name: str = "mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise InputError(f"{name} is {m.shape}, expected {tuple(shape)}")
    if m.dtype == bool:
        return m.astype(np.int64)
    if not np.issubdtype(m.dtype, np.integer):
        raise InputError(f"{name} must hold integer labels")
    if m.size and (m.min() < 0 or (n_classes is not None and m.max() > n_classes)):
        raise InputError(f"{name} has labels outside 0..{n_classes}")
    return m.astype(np.int64)


def check_cameras(cameras) -> list[Camera]:
    cams = list(cameras)
    if not cams:
        raise InputError("at least one camera is required")
    for c in cams:
        if not isinstance(c, Camera):
            raise InputError(f"expected Camera objects, got {type(c).__name__}")
    return cams


def check_views(views) -> list[View]:
    """Views as ``View`` tuples with images matching their cameras."""
    out = []
    for i, v in enumerate(views):
        v = v if isinstance(v, View) else View(*v)
        check_cameras([v.camera])
        img = check_image(v.image, v.camera.shape, f"view {i} image")
        mask = None if v.mask is None else np.asarray(v.mask, bool)
        if mask is not None and mask.shape != v.camera.shape:
            raise InputError(f"view {i} loss mask does not match its image")
        out.append(View(v.camera, img, mask))
    if not out:
        raise InputError("at least one view is required")
    return out
