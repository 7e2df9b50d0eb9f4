"""Digital-twin updating from a later survey.

The existing model is rendered at the new survey poses and its damage masks
are compared with the survey's masks. Damage that the model does not explain
is recoloured with a per-class "new" colour and absorbed by a local
refinement, leaving the rest of the model untouched.

Progression masks use 0 for background, ``k`` for pre-existing damage of
label ``k`` and ``NEW_OFFSET + k`` for newly detected damage of that label.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .damage import DamageClass, composite_mask, extract_mask, validate_classes
from .errors import InputError
from .gaussians import Camera, GaussianCloud
from .hierarchy import (HULL_DILATION_PX, K_MIN, V_MIN, Selection, color_labels, dilate,
                        expand_neighbors, hull_mask, projection_votes, refine)
from .optimizer import TrainConfig, View, scene_extent
from .rasterizer import render_image

NEW_OFFSET = 100
DIFF_TOLERANCE_PX = 3
NEW_COLORS = ((0.0, 1.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 0.0))
MIN_NEW_PIXELS = 12
MAX_ROUNDS = 2


class MaskDiff(NamedTuple):
    progression: np.ndarray
    shrinkage: np.ndarray  # old damage the new survey no longer shows


def base_classes(classes) -> list[DamageClass]:
    return [c for c in classes if c.parent is None]


def parent_labels(classes) -> np.ndarray:
    """Map every label to the label of its root class (index 0 is background)."""
    names = [c.name for c in classes]
    out = np.arange(len(classes) + 1)
    for i, c in enumerate(classes):
        if c.parent is not None:
            out[i + 1] = names.index(c.parent) + 1
    return out


def with_new_classes(classes, new_colors=None, roots=None) -> list[DamageClass]:
    """The class table extended with a ``new_<name>`` child for each root class
    (or each root label in ``roots``) that lacks one.

    Children already present are kept; labels of existing classes never move.
    Colours are taken in order from ``new_colors``, skipping ones in use.
    """
    classes = list(classes)
    existing = {c.parent for c in classes if c.parent is not None}
    used = {c.color for c in classes}
    colors = [tuple(float(v) for v in col) for col in (new_colors or NEW_COLORS)]
    colors = [col for col in colors if col not in used]
    for label, c in enumerate(classes, start=1):
        if c.parent is not None or c.name in existing:
            continue
        if roots is not None and label not in roots:
            continue
        if not colors:
            raise InputError("not enough colours for new-damage classes")
        classes.append(DamageClass(f"new_{c.name}", colors.pop(0), c.tolerance, c.name))
    return validate_classes(classes)


def new_class_labels(classes) -> dict:
    """Root label -> label of its ``new`` child."""
    names = [c.name for c in classes]
    return {names.index(c.parent) + 1: i + 1 for i, c in enumerate(classes)
            if c.parent is not None}


def render_segmentation_views(cloud: GaussianCloud, cameras, classes, *,
                              background=(0.0, 0.0, 0.0), collapse: bool = True) -> list:
    """Damage masks the model shows at ``cameras``.

    With ``collapse``, labels of child classes fold into their roots so the
    result is comparable with survey masks that only know root classes.
    """
    classes = list(classes)
    roots = parent_labels(classes)
    out = []
    for cam in cameras:
        if cloud.count == 0:
            out.append(np.zeros(cam.shape, np.int64))
            continue
        labels = extract_mask(render_image(cloud, cam, background=background), classes)
        out.append(roots[labels] if collapse else labels)
    return out


def diff_masks(new_mask, old_mask, tolerance_px: float = DIFF_TOLERANCE_PX) -> MaskDiff:
    """Split survey damage into pre-existing and new, per label."""
    new_mask, old_mask = np.asarray(new_mask), np.asarray(old_mask)
    if new_mask.shape != old_mask.shape:
        raise InputError(f"mask shapes differ: {new_mask.shape} vs {old_mask.shape}")
    prog = np.zeros(new_mask.shape, np.int64)
    shrink = np.zeros(new_mask.shape, bool)
    for k in np.union1d(np.unique(new_mask), np.unique(old_mask)):
        if k == 0:
            continue
        here = new_mask == k
        near = dilate(old_mask == k, tolerance_px)
        prog[here & near] = k
        prog[here & ~near] = NEW_OFFSET + k
        shrink |= (old_mask == k) & ~dilate(here, tolerance_px)
    return MaskDiff(prog, shrink)


def recolor_progression(image, progression, classes) -> np.ndarray:
    """Composite pre-existing damage in its class colour and new damage in the
    colour of the class's ``new`` child."""
    classes = validate_classes(classes)
    progression = np.asarray(progression)
    children = new_class_labels(classes)
    labels = np.where(progression >= NEW_OFFSET, 0, progression)
    for k in np.unique(progression[progression >= NEW_OFFSET]):
        root = int(k) - NEW_OFFSET
        if root not in children:
            raise InputError(f"no new-damage class for label {root}")
        labels[progression == k] = children[root]
    return composite_mask(image, labels, classes)


@dataclass
class UpdatePlan:
    cameras: list
    images: list
    survey_masks: list
    rendered_masks: list = field(default_factory=list)
    progression_masks: list = field(default_factory=list)
    shrinkage: list = field(default_factory=list)

    @property
    def new_pixels(self) -> int:
        return int(sum(np.count_nonzero(p >= NEW_OFFSET) for p in self.progression_masks))

    def check(self) -> None:
        n = len(self.cameras)
        if not (len(self.images) == len(self.survey_masks) == len(self.rendered_masks)
                == len(self.progression_masks) == n):
            raise InputError("update plan needs an image, a survey mask, a rendered mask "
                             "and a progression mask for every new view")


def plan_update(cloud: GaussianCloud, cameras, images, survey_masks, classes, *,
                tolerance_px: float = DIFF_TOLERANCE_PX, background=(0.0, 0.0, 0.0)) -> UpdatePlan:
    cameras, images, survey_masks = list(cameras), list(images), list(survey_masks)
    rendered = render_segmentation_views(cloud, cameras, classes, background=background)
    plan = UpdatePlan(cameras, images, survey_masks, rendered)
    for new, old in zip(survey_masks, rendered, strict=True):
        d = diff_masks(new, old, tolerance_px)
        plan.progression_masks.append(d.progression)
        plan.shrinkage.append(d.shrinkage)
    plan.check()
    return plan


@dataclass
class UpdateReport:
    no_op: bool
    new_pixels: int
    shrinkage_pixels: int
    damage_selected: int = 0
    neighbors_selected: int = 0
    count_before: int = 0
    count_after: int = 0
    rounds: int = 0
    residual_new_pixels: int = 0
    classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["classes"] = [dict(name=c.name, **c.to_dict()) for c in self.classes]
        return d


def select_for_update(cloud: GaussianCloud, plan: UpdatePlan, classes, *, v_min: int = V_MIN,
                      k_min: int = K_MIN, hull_dilation_px: float = HULL_DILATION_PX,
                      train_cameras=None) -> Selection:
    """Primitives behind new damage (by projection alone, since the old model
    cannot carry the new colour yet) plus colour-confirmed pre-existing ones."""
    cams = plan.cameras
    n = cloud.count
    chosen = np.zeros(n, bool)
    for k in np.unique(np.concatenate([np.unique(p) for p in plan.progression_masks])):
        if k < NEW_OFFSET:
            continue
        votes = projection_votes(cloud, np.full(n, 1), [p == k for p in plan.progression_masks],
                                 cams)
        chosen |= votes >= v_min
    old_masks = [np.where(p >= NEW_OFFSET, 0, p) for p in plan.progression_masks]
    labels = parent_labels(classes)[color_labels(cloud, classes, train_cameras or cams)]
    chosen |= (labels > 0) & (projection_votes(cloud, labels, old_masks, cams) >= v_min)
    damage = np.flatnonzero(chosen)
    if len(damage) and len(damage) < n:
        neighbors = expand_neighbors(cloud, damage, k_min, None, scene_extent(cams))
    else:
        neighbors = np.zeros(0, np.int64)
    sel = Selection(damage, neighbors)
    idx = sel.indices
    for cam in cams:
        sel.hull_masks[cam.id] = (hull_mask(cloud, idx, cam, hull_dilation_px) if len(idx)
                                  else np.zeros(cam.shape, bool))
    return sel


def update_model(cloud: GaussianCloud, plan: UpdatePlan, classes, cfg: TrainConfig | None = None,
                 mode: str = "finetune", *, min_new_pixels: int = MIN_NEW_PIXELS,
                 new_colors=None, iterations: int | None = None, v_min: int = V_MIN,
                 k_min: int = K_MIN, train_cameras=None, max_rounds: int = MAX_ROUNDS):
    """Absorb newly detected damage into the model with a local refinement.

    Returns ``(cloud, report)``; ``report.classes`` is the class table with
    the new-damage children registered. Without new damage the input is
    returned unchanged. The survey is re-diffed after each refinement and,
    while unexplained new damage remains, refined again (at most
    ``max_rounds`` times) so that repeating the update is a no-op.
    """
    plan.check()
    roots = {int(k) - NEW_OFFSET for p in plan.progression_masks for k in np.unique(p)
             if k >= NEW_OFFSET}
    ext = with_new_classes(classes, new_colors, roots)
    shrink = int(sum(np.count_nonzero(s) for s in plan.shrinkage))
    floor = max(min_new_pixels, 1)
    report = UpdateReport(plan.new_pixels < floor, plan.new_pixels, shrink,
                          count_before=cloud.count, classes=ext)
    if report.no_op:
        report.count_after = cloud.count
        return cloud.copy(), report
    # targets keep the first diff: later rounds only decide whether to go on
    targets = [recolor_progression(img, prog, ext)
               for img, prog in zip(plan.images, plan.progression_masks)]
    cams = train_cameras or plan.cameras
    out, current = cloud, plan
    for _ in range(max(max_rounds, 1)):
        sel = select_for_update(out, current, ext, v_min=v_min, k_min=k_min,
                                train_cameras=train_cameras)
        if out is cloud:
            report.damage_selected = len(sel.damage_indices)
            report.neighbors_selected = len(sel.neighbor_indices)
        if not len(sel.indices):
            raise InputError("new damage was detected but no primitive projects into it")
        views = [View(cam, t) for cam, t in zip(plan.cameras, targets)
                 if sel.hull_masks[cam.id].any()]
        out, rep = refine(out, sel, views, cfg, mode, iterations=iterations)
        touched = np.isin(rep.origin, sel.indices)
        out.damage_label[touched] = color_labels(out.subset(np.flatnonzero(touched)), ext, cams)
        report.rounds += 1
        current = plan_update(out, plan.cameras, plan.images, plan.survey_masks, ext)
        report.residual_new_pixels = current.new_pixels
        if current.new_pixels < floor:
            break
    report.count_after = out.count
    return out, report


def survey_cameras(cameras, names) -> list[Camera]:
    names = set(names)
    return [c for c in cameras if c.id in names]
