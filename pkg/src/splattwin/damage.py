"""Damage classes, colour-coded training targets, mask noise and mask metrics.

Label arrays use 0 for background and ``k + 1`` for ``classes[k]``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError
from .gaussians import GaussianCloud
from .optimizer import TrainConfig, TrainReport, View, train

DEFAULT_TOLERANCE = 0.15


@dataclass(frozen=True)
class DamageClass:
    """A damage category and the solid overlay colour that encodes it.

    ``parent`` names the class this one refines (used for newly detected
    damage of an existing category).
    """

    name: str
    color: tuple
    tolerance: float = DEFAULT_TOLERANCE
    parent: str | None = None

    def __post_init__(self):
        color = tuple(float(c) for c in self.color)
        if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
            raise ConfigError(f"class {self.name}: colour must be 3 values in [0, 1]")
        if not 0 < self.tolerance < 0.5:
            raise ConfigError(f"class {self.name}: tolerance must lie in (0, 0.5)")
        object.__setattr__(self, "color", color)

    def to_dict(self) -> dict:
        d = {"color": list(self.color), "tolerance": self.tolerance}
        if self.parent is not None:
            d["parent"] = self.parent
        return d


def validate_classes(classes) -> list[DamageClass]:
    classes = list(classes)
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate class names")
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            gap = np.max(np.abs(np.subtract(a.color, b.color)))
            if gap <= a.tolerance + b.tolerance:
                raise ConfigError(f"classes {a.name} and {b.name} have overlapping colours")
    for c in classes:
        if c.parent is not None and c.parent not in names:
            raise ConfigError(f"class {c.name}: unknown parent {c.parent}")
    return classes


def load_classes(path) -> list[DamageClass]:
    """Read a JSON object mapping class name to a colour or to a full record."""
    try:
        with open(os.fspath(path), encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read classes ({exc})") from None
    if isinstance(data, dict) and "classes" in data and isinstance(data["classes"], dict):
        data = data["classes"]
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: classes file must be a JSON object")
    classes = []
    for name, rec in data.items():
        if isinstance(rec, dict):
            unknown = set(rec) - {"color", "tolerance", "parent"}
            if unknown or "color" not in rec:
                raise ConfigError(f"{path}: bad record for class {name}")
            classes.append(DamageClass(name, rec["color"], rec.get("tolerance", DEFAULT_TOLERANCE),
                                       rec.get("parent")))
        else:
            classes.append(DamageClass(name, rec))
    return validate_classes(classes)


def save_classes(classes, path) -> None:
    data = {c.name: c.to_dict() for c in classes}
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)


def class_colors(classes) -> np.ndarray:
    return np.array([c.color for c in classes], dtype=np.float64).reshape(-1, 3)


def _check_labels(mask, n_classes, shape=None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = mask.astype(np.int64)
    if shape is not None and mask.shape != shape:
        raise InputError(f"mask shape {mask.shape} does not match image {shape}")
    if mask.size and (mask.min() < 0 or mask.max() > n_classes):
        raise InputError(f"mask contains labels outside 0..{n_classes}")
    return mask


def composite_mask(image, mask, classes) -> np.ndarray:
    """Paint every labelled pixel with its class colour (opaque overlay)."""
    image = np.asarray(image, dtype=np.float64)
    mask = _check_labels(mask, len(classes), image.shape[:2])
    out = image.copy()
    colors = class_colors(classes)
    hit = mask > 0
    out[hit] = colors[mask[hit] - 1]
    return out


def classify_colors(rgb, classes) -> np.ndarray:
    """Label each colour with the nearest class within its tolerance, else 0."""
    rgb = np.asarray(rgb, dtype=np.float64)
    labels = np.zeros(rgb.shape[:-1], np.int64)
    if not len(classes):
        return labels
    colors = class_colors(classes)
    tol = np.array([c.tolerance for c in classes])
    dist = np.max(np.abs(rgb[..., None, :] - colors), axis=-1)
    within = dist <= tol
    dist = np.where(within, dist, np.inf)
    best = np.argmin(dist, axis=-1)
    hit = np.any(within, axis=-1)
    labels[hit] = best[hit] + 1
    return labels


def extract_mask(image, classes) -> np.ndarray:
    """Recover a label mask from a rendered damage-coloured image."""
    validate_classes(classes)
    return classify_colors(image, classes)


def mask_iou(a, b, label: int = 1) -> float:
    """Intersection over union of ``label`` in two label masks (1 if both empty)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    ia, ib = a == label, b == label
    union = np.count_nonzero(ia | ib)
    if union == 0:
        return 1.0
    return np.count_nonzero(ia & ib) / union


def _blob(shape, center, radius: float, rng) -> np.ndarray:
    """Union of 3 to 6 jittered disks, each containing ``center``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros(shape, bool)
    for _ in range(rng.integers(3, 7)):
        r = rng.uniform(0.5, 1.0) * radius
        ang = rng.uniform(0.0, 2.0 * np.pi)
        off = rng.uniform(0.0, 0.8) * r
        cy, cx = center[0] + off * np.sin(ang), center[1] + off * np.cos(ang)
        out |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return out


def inject_mask_errors(mask, seed, add_blobs: int = 1, remove_blobs: int = 1,
                       blob_radius_px=(3.0, 6.0), label: int | None = None) -> np.ndarray:
    """Corrupt a label mask with irregular false-positive and false-negative blobs.

    Added blobs take ``label`` (default: the most common damage label, or 1)
    and are centred outside existing damage but within twice their radius of
    it, when there is any. Removed blobs are centred on a damaged pixel.
    """
    mask = np.asarray(mask)
    out = mask.copy()
    rng = np.random.default_rng(seed)
    lo, hi = blob_radius_px
    damaged = mask > 0
    if label is None:
        counts = np.bincount(mask[damaged].ravel().astype(np.int64)) if damaged.any() else []
        label = int(np.argmax(counts)) if len(counts) else 1
    dist = ndimage.distance_transform_edt(~damaged) if damaged.any() else None
    for _ in range(add_blobs):
        r = rng.uniform(lo, hi)
        if dist is None:
            cand = np.argwhere(np.ones(mask.shape, bool))
        else:
            cand = np.argwhere((dist > 0) & (dist <= 2 * r))
        if not len(cand):
            continue
        center = cand[rng.integers(len(cand))]
        out[_blob(mask.shape, center, r, rng)] = label
    cand = np.argwhere(damaged)
    for _ in range(remove_blobs):
        if not len(cand):
            break
        r = rng.uniform(lo, hi)
        center = cand[rng.integers(len(cand))]
        out[_blob(mask.shape, center, r, rng)] = 0
    return out


def damage_views(views, masks, classes) -> list[View]:
    """Replace each view's target by its damage-composited version."""
    out = []
    for v, m in zip(views, masks, strict=True):
        v = v if isinstance(v, View) else View(*v)
        out.append(View(v.camera, composite_mask(v.image, m, classes), v.mask))
    return out


def train_damage(cloud: GaussianCloud, views, cfg: TrainConfig | None = None,
                 **kwargs) -> tuple[GaussianCloud, TrainReport]:
    """Ordinary training whose targets are damage-composited images.

    Poses must come from the unaltered photographs; only the targets change.
    """
    return train(cloud, views, cfg, **kwargs)
