"""Coarse-to-fine damage refinement.

A low-resolution model is trained first. Primitives that carry a damage
colour and project into the matching masks are selected, a neighbourhood is
grown around them, and only that subset is optimised at full resolution,
with the loss restricted to dilated convex hulls of the subset in each view.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .damage import classify_colors, composite_mask
from .errors import InputError
from .gaussians import NEAR_PLANE, Camera, GaussianCloud, eval_sh_batch
from .io.images import load_mask, save_mask
from .optimizer import TrainConfig, TrainReport, View, scene_extent, train
from .rasterizer import project_and_cull, render

log = logging.getLogger(__name__)

V_MIN = 2
MASK_DILATION_PX = 2
DEPTH_MARGIN = 0.05  # fraction of scene extent
K_MIN = 50
HULL_DILATION_PX = 8
HULL_SIGMA = 2.0
REFINE_ITERATIONS = 1000
REFINE_DENSIFY_INTERVAL = 100


def downsample_image(image, factor: int) -> np.ndarray:
    """Box-filter average over ``factor x factor`` blocks (floor dimensions)."""
    factor = int(factor)
    if factor < 1:
        raise InputError("downsampling factor must be a positive integer")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[0] // factor, img.shape[1] // factor
    if h == 0 or w == 0:
        raise InputError(f"image {img.shape[:2]} is smaller than factor {factor}")
    img = img[:h * factor, :w * factor]
    return img.reshape(h, factor, w, factor, *img.shape[2:]).mean(axis=(1, 3))


def disk(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= radius * radius


def dilate(mask, radius: float) -> np.ndarray:
    mask = np.asarray(mask, bool)
    if radius <= 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius))


def mean_view_directions(cloud: GaussianCloud, cameras) -> np.ndarray:
    """Per-primitive unit mean of the directions from each camera centre."""
    acc = np.zeros((cloud.count, 3))
    for cam in cameras:
        d = cloud.positions - cam.center
        acc += d / np.linalg.norm(d, axis=1, keepdims=True)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.tile([0.0, 0.0, 1.0], (cloud.count, 1)), where=norm > 0)


def color_labels(cloud: GaussianCloud, classes, cameras) -> np.ndarray:
    """Damage label each primitive's colour matches, seen from its mean view."""
    if cloud.count == 0:
        return np.zeros(0, np.int64)
    rgb, _, _ = eval_sh_batch(cloud.sh_coeffs, mean_view_directions(cloud, cameras),
                              cloud.sh_degree)
    return classify_colors(rgb, classes)


def projection_votes(cloud: GaussianCloud, labels: np.ndarray, masks, cameras, *,
                     dilation_px: float = MASK_DILATION_PX, depth_margin: float | None = None,
                     background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Count views in which each primitive's centre lands, unoccluded, inside
    the (dilated) mask of its own label."""
    if depth_margin is None:
        depth_margin = DEPTH_MARGIN * scene_extent(cameras)
    votes = np.zeros(cloud.count, np.int64)
    cand = np.flatnonzero(labels > 0)
    if not len(cand):
        return votes
    for cam, mask in zip(cameras, masks, strict=True):
        mask = np.asarray(mask)
        if mask.shape != cam.shape:
            raise InputError(f"mask for camera {cam.id} has shape {mask.shape}, "
                             f"expected {cam.shape}")
        median = render(cloud, cam, background=background).median_depth
        uv, z = cam.project(cloud.positions[cand])
        with np.errstate(invalid="ignore"):
            col = np.rint(uv[:, 0])
            row = np.rint(uv[:, 1])
        ok = (z > NEAR_PLANE) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        idx, col, row, z = cand[ok], col[ok].astype(int), row[ok].astype(int), z[ok]
        hit = np.zeros(len(idx), bool)
        for label in np.unique(labels[idx]):
            region = dilate(mask == label, dilation_px)
            sel = labels[idx] == label
            hit[sel] = region[row[sel], col[sel]]
        hit &= z <= median[row, col] + depth_margin
        votes[idx[hit]] += 1
    return votes


def select_damage_gaussians(cloud: GaussianCloud, classes, masks, cameras, *,
                            v_min: int = V_MIN, dilation_px: float = MASK_DILATION_PX,
                            depth_margin: float | None = None,
                            train_cameras=None, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Indices of primitives that match a damage colour and are confirmed by
    at least ``v_min`` masks.

    Colours are evaluated at each primitive's mean viewing direction over
    ``train_cameras`` (default: the mask cameras).
    """
    masks = list(masks) if masks is not None else []
    if not masks:
        raise InputError("damage selection needs at least one mask")
    labels = color_labels(cloud, classes, train_cameras or cameras)
    votes = projection_votes(cloud, labels, masks, cameras, dilation_px=dilation_px,
                             depth_margin=depth_margin, background=background)
    return np.flatnonzero((labels > 0) & (votes >= v_min))


def expand_neighbors(cloud: GaussianCloud, seeds, k_min: int = K_MIN, r0: float | None = None,
                     extent: float | None = None) -> np.ndarray:
    """Primitives near the seeds, with a search radius doubled until at least
    ``k_min`` of them are found or the radius exceeds ``extent``."""
    seeds = np.unique(np.asarray(seeds, dtype=np.int64))
    if not len(seeds):
        raise InputError("neighbour expansion needs at least one seed")
    if r0 is None:
        r0 = 2.0 * float(np.median(cloud.scales[seeds].max(axis=1)))
    if extent is None:
        span = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
        extent = float(np.linalg.norm(span)) or 1.0
    if not r0 > 0:
        raise InputError("initial radius must be positive")
    tree = cKDTree(cloud.positions)
    seed_set = np.zeros(cloud.count, bool)
    seed_set[seeds] = True
    r = r0
    while True:
        hits = np.zeros(cloud.count, bool)
        for lst in tree.query_ball_point(cloud.positions[seeds], r):
            hits[lst] = True
        found = np.flatnonzero(hits & ~seed_set)
        if len(found) >= k_min or r > extent:
            log.debug("neighbour radius %.4g: %d primitives", r, len(found))
            return found
        r *= 2.0


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull vertices by Andrew's monotone chain.

    Degenerate inputs return one point or the two ends of a segment.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def rasterize_convex(hull: np.ndarray, shape) -> np.ndarray:
    """Pixels whose unit square (centred on the pixel) meets the convex hull."""
    h, w = shape
    out = np.zeros((h, w), bool)
    if not len(hull):
        return out
    lo = np.maximum(np.ceil(hull.min(axis=0) - 0.5).astype(int), 0)
    hi = np.minimum(np.floor(hull.max(axis=0) + 0.5).astype(int), [w - 1, h - 1])
    if lo[0] > hi[0] or lo[1] > hi[1]:
        return out
    yy, xx = np.mgrid[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1].astype(np.float64)
    inside = np.ones(xx.shape, bool)
    n = len(hull)
    if n >= 2:
        for i in range(n if n > 2 else 2):
            p, q = hull[i], hull[(i + 1) % n]
            e = q - p
            normal = np.array([e[1], -e[0]])  # outward for a counter-clockwise hull
            reach = 0.5 * (abs(normal[0]) + abs(normal[1]))
            inside &= (normal[0] * (xx - p[0]) + normal[1] * (yy - p[1])) - reach <= 1e-9
    out[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] = inside
    return out


def footprint_points(cloud: GaussianCloud, indices, camera: Camera,
                     sigma: float = HULL_SIGMA) -> np.ndarray:
    """Projected centres plus points on each ``sigma`` ellipse boundary, for
    the selected primitives whose centres land inside the frame."""
    sub = cloud.subset(np.asarray(indices, dtype=np.int64))
    sp = project_and_cull(sub, camera)
    u, v = sp.mean2d[:, 0], sp.mean2d[:, 1]
    inframe = (u >= -0.5) & (u < camera.width - 0.5) & (v >= -0.5) & (v < camera.height - 0.5)
    mean = sp.mean2d[inframe]
    a, b, c = sp.cov2d[inframe].T
    pts = [mean]
    for ang in np.linspace(0.0, np.pi, 4, endpoint=False):
        d = np.array([np.cos(ang), np.sin(ang)])
        sd = np.stack([a * d[0] + b * d[1], b * d[0] + c * d[1]], axis=1)
        scale = sigma / np.sqrt(np.maximum(sd @ d, 1e-300))
        pts += [mean + sd * scale[:, None], mean - sd * scale[:, None]]
    return np.concatenate(pts)


def hull_mask(cloud: GaussianCloud, indices, camera: Camera,
              dilation_px: float = HULL_DILATION_PX, sigma: float = HULL_SIGMA) -> np.ndarray:
    """Dilated convex hull of the selection's screen footprint in one view."""
    pts = footprint_points(cloud, indices, camera, sigma)
    mask = rasterize_convex(convex_hull(pts), camera.shape) if len(pts) else \
        np.zeros(camera.shape, bool)
    return dilate(mask, dilation_px)


class FootprintConstraint:
    """Admissibility test keeping 3-sigma screen footprints inside hull masks.

    A primitive is admissible when, in every constrained view, either its
    footprint misses the image or every pixel it can touch lies in the mask.
    The test is conservative: it compares the distance from the centre pixel
    to the nearest unmasked pixel with the footprint's major radius.
    """

    def __init__(self, cameras, masks):
        self.cameras = list(cameras)
        self.clearance = [ndimage.distance_transform_edt(np.pad(np.asarray(m, bool), 1))[1:-1, 1:-1]
                          for m in masks]

    def __call__(self, cloud: GaussianCloud) -> np.ndarray:
        ok = np.ones(cloud.count, bool)
        live = np.flatnonzero(~cloud.frozen)
        if not len(live):
            return ok
        sub = cloud.subset(live)
        for cam, clear in zip(self.cameras, self.clearance):
            sp = project_and_cull(sub, cam)
            a, b, c = sp.cov2d.T
            lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
            radius = 3.0 * np.sqrt(lam)
            col = np.rint(sp.mean2d[:, 0])
            row = np.rint(sp.mean2d[:, 1])
            inside = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
            room = np.zeros(len(sp))
            room[inside] = clear[row[inside].astype(int), col[inside].astype(int)]
            fits = room > radius + np.sqrt(0.5)
            ok[live[sp.source_index[~fits]]] = False
        return ok


@dataclass
class Selection:
    damage_indices: np.ndarray
    neighbor_indices: np.ndarray
    hull_masks: dict = field(default_factory=dict)

    def __post_init__(self):
        self.damage_indices = np.asarray(self.damage_indices, dtype=np.int64)
        self.neighbor_indices = np.asarray(self.neighbor_indices, dtype=np.int64)
        if np.intersect1d(self.damage_indices, self.neighbor_indices).size:
            raise InputError("neighbour indices must be disjoint from damage indices")

    @property
    def indices(self) -> np.ndarray:
        return np.union1d(self.damage_indices, self.neighbor_indices)

    def validate(self, cloud: GaussianCloud) -> None:
        idx = self.indices
        if len(idx) and (idx.min() < 0 or idx.max() >= cloud.count):
            raise InputError("selection indices are out of range for this cloud")

    def save(self, path, mask_dir=None) -> None:
        """Write the index lists as JSON and hull masks as PNG files next to it."""
        path = os.fspath(path)
        mask_dir = mask_dir or os.path.splitext(path)[0] + "_hulls"
        os.makedirs(mask_dir, exist_ok=True)
        refs = {}
        for cid, m in self.hull_masks.items():
            fname = os.path.join(mask_dir, f"{cid}.png")
            save_mask(m, fname)
            refs[cid] = os.path.relpath(fname, os.path.dirname(os.path.abspath(path)))
        doc = {"damage_indices": self.damage_indices.tolist(),
               "neighbor_indices": self.neighbor_indices.tolist(), "hull_masks": refs}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path) -> "Selection":
        path = os.fspath(path)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
            base = os.path.dirname(os.path.abspath(path))
            masks = {cid: load_mask(os.path.join(base, ref))
                     for cid, ref in doc.get("hull_masks", {}).items()}
            return cls(doc["damage_indices"], doc["neighbor_indices"], masks)
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: invalid selection file ({exc})") from None


def select(cloud: GaussianCloud, classes, masks, cameras, *, hull_cameras=None,
           k_min: int = K_MIN, r0: float | None = None, v_min: int = V_MIN,
           hull_dilation_px: float = HULL_DILATION_PX, train_cameras=None) -> Selection:
    """Damage primitives, their neighbourhood, and hull masks for ``hull_cameras``."""
    damage = select_damage_gaussians(cloud, classes, masks, cameras, v_min=v_min,
                                     train_cameras=train_cameras)
    if len(damage) and len(damage) < cloud.count:
        extent = scene_extent(list(cameras))
        neighbors = expand_neighbors(cloud, damage, k_min, r0, extent)
    else:
        neighbors = np.zeros(0, np.int64)
    sel = Selection(damage, neighbors)
    idx = sel.indices
    for cam in hull_cameras if hull_cameras is not None else cameras:
        sel.hull_masks[cam.id] = (hull_mask(cloud, idx, cam, hull_dilation_px) if len(idx)
                                  else np.zeros(cam.shape, bool))
    return sel


def refine_config(cfg: TrainConfig | None, mode: str, iterations: int | None = None) -> TrainConfig:
    if mode not in ("finetune", "retrain"):
        raise InputError(f"refine mode must be 'finetune' or 'retrain', not {mode!r}")
    cfg = cfg or TrainConfig(iterations=REFINE_ITERATIONS)
    changes = {"densify": mode == "retrain", "opacity_reset_interval": None}
    if iterations is not None:
        changes["iterations"] = iterations
    if mode == "retrain":
        changes["densify_interval"] = REFINE_DENSIFY_INTERVAL
        changes["densify_start"] = REFINE_DENSIFY_INTERVAL
        changes["densify_end"] = changes.get("iterations", cfg.iterations)
    return dataclasses.replace(cfg, **changes)


def refine(cloud: GaussianCloud, selection: Selection, views, cfg: TrainConfig | None = None,
           mode: str = "finetune", *, iterations: int | None = None,
           extent: float | None = None) -> tuple[GaussianCloud, TrainReport]:
    """Optimise only the selected primitives, with the loss inside hull masks.

    ``finetune`` keeps the primitive count; ``retrain`` lets clone/split/prune
    act on the selected primitives and their offspring. Frozen flags of the
    input are restored on the output.
    """
    cfg = refine_config(cfg, mode, iterations)
    selection.validate(cloud)
    idx = selection.indices
    if not len(idx):
        raise InputError("refinement needs a non-empty selection")
    masked = []
    for v in views:
        v = v if isinstance(v, View) else View(*v)
        if v.camera.id not in selection.hull_masks:
            raise InputError(f"no hull mask for view {v.camera.id}")
        hm = np.asarray(selection.hull_masks[v.camera.id], bool)
        if hm.shape != v.camera.shape:
            raise InputError(f"hull mask for view {v.camera.id} does not match its resolution")
        masked.append(View(v.camera, v.image, hm))
    work = cloud.copy()
    user_frozen = cloud.frozen.copy()
    work.frozen = np.ones(cloud.count, bool)
    work.frozen[idx] = False
    work.frozen |= user_frozen
    # selected primitives whose footprint already spills over a hull stay
    # fixed, so pixels outside the hulls cannot change
    constraint = FootprintConstraint([v.camera for v in masked], [v.mask for v in masked])
    work.frozen |= ~constraint(work)
    log.info("refine: %d of %d selected primitives are trainable",
             int(np.count_nonzero(~work.frozen)), len(idx))
    if cfg.extent is None:
        ext = extent if extent is not None else scene_extent([v.camera for v in masked])
        cfg = dataclasses.replace(cfg, extent=ext)
    out, report = train(work, masked, cfg, constraint=constraint)
    out.frozen = user_frozen[report.origin]
    return out, report


def lowres_views(views, masks, classes, factor: int) -> list[View]:
    """Composite at full resolution, then box-downsample image and camera."""
    out = []
    for v, m in zip(views, masks, strict=True):
        v = v if isinstance(v, View) else View(*v)
        target = composite_mask(v.image, m, classes) if m is not None else v.image
        out.append(View(v.camera.downscaled(factor), downsample_image(target, factor)))
    return out
