"""Training loop: Adam updates per parameter group plus clone/split/prune.

Frozen primitives are never updated, densified or pruned, which is what the
hierarchical refinement relies on.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ConsistencyError, InputError
from .gaussians import (Camera, GaussianCloud, logit, normalize_quats, quat_to_rotmat,
                        rgb_to_sh_dc, sh_terms)
from .losses import Gradients, LossConfig, backward
from .rasterizer import render, tiles_touching

log = logging.getLogger(__name__)

GROUPS = Gradients.GROUPS


@dataclass
class TrainConfig:
    iterations: int = 3000
    sh_degree: int = 1
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    position_lr_max_steps: int | None = 30000  # None: decay over `iterations`
    rotation_lr: float = 1e-3
    scaling_lr: float = 5e-3
    opacity_lr: float = 5e-2
    sh_lr: float = 2.5e-3
    sh_rest_lr_factor: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    densify: bool = True
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.01
    prune_opacity_threshold: float = 0.005
    prune_max_screen_size: float | None = None
    prune_max_world_scale: float | None = None
    densify_start: int = 500
    densify_end: int = 15000
    opacity_reset_interval: int | None = 3000
    scale_penalty: float = 0.0
    extent: float | None = None
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    log_interval: int = 100
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.background = tuple(float(v) for v in self.background)
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        for name in ("densify_interval", "densify_grad_threshold", "split_scale_threshold",
                     "prune_opacity_threshold", "adam_eps", "tile_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in 0..3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


@dataclass
class TrainReport:
    iterations: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    count: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    wall_seconds: float = 0.0
    origin: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "loss": self.loss, "count": self.count,
                "psnr": self.psnr, "wall_seconds": self.wall_seconds}


class View(NamedTuple):
    camera: Camera
    image: np.ndarray
    mask: np.ndarray | None = None


def scene_extent(cameras: Sequence[Camera]) -> float:
    """Radius of the centroid-centred sphere bounding all camera centres."""
    if not cameras:
        return 1.0
    centers = np.array([c.center for c in cameras])
    r = float(np.max(np.linalg.norm(centers - centers.mean(0), axis=1)))
    return r if r > 0 else 1.0


def psnr(a, b, mask=None) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    err = (a - b) ** 2
    if mask is not None:
        err = err[mask]
    if err.size == 0:
        return float("inf")
    mse = err.mean()
    return float("inf") if mse == 0 else float(-10 * np.log10(mse))


def init_from_points(points, colors, cameras: Sequence[Camera] = (), *, sh_degree: int = 1,
                     extent: float | None = None) -> GaussianCloud:
    """One isotropic primitive per point, sized by its 3 nearest neighbours."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise InputError("cannot initialise from an empty point set")
    if len(colors) != n:
        raise InputError("points and colors differ in length")
    extent = extent if extent is not None else scene_extent(list(cameras))
    k = min(3, n - 1)
    if k > 0:
        dist, _ = cKDTree(points).query(points, k=k + 1)
        mean_d = dist[:, 1:].reshape(n, k).mean(axis=1)
    else:
        mean_d = np.zeros(n)
    scale = np.clip(mean_d, 1e-4, max(extent, 1e-4))
    sh = np.zeros((n, sh_terms(sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(colors)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(points.copy(), rot, np.repeat(np.log(scale)[:, None], 3, axis=1),
                         np.full(n, float(logit(0.1))), sh)


class AdamState:
    def __init__(self, cloud: GaussianCloud):
        self.step = 0
        self.m = {g: np.zeros_like(getattr(cloud, g)) for g in GROUPS}
        self.v = {g: np.zeros_like(getattr(cloud, g)) for g in GROUPS}

    def remap(self, origin: np.ndarray, fresh: np.ndarray) -> None:
        for d in (self.m, self.v):
            for g in GROUPS:
                arr = d[g][origin]
                arr[fresh] = 0.0
                d[g] = arr


def adam_step(cloud: GaussianCloud, grads: Gradients, state: AdamState, lrs: dict,
              cfg: TrainConfig | None = None):
    """Bias-corrected Adam update of every unfrozen primitive (in place)."""
    cfg = cfg or TrainConfig()
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    live = ~cloud.frozen
    for g in GROUPS:
        param = getattr(cloud, g)
        grad = getattr(grads, g)
        if grad.shape != param.shape or state.m[g].shape != param.shape:
            raise ConsistencyError(f"shape mismatch in group {g}")
        lr = lrs[g]
        m, v = state.m[g], state.v[g]
        m[live] = b1 * m[live] + (1 - b1) * grad[live]
        v[live] = b2 * v[live] + (1 - b2) * grad[live] ** 2
        upd = (m[live] / c1) / (np.sqrt(v[live] / c2) + eps)
        if g == "sh_coeffs":
            # higher SH bands learn more slowly than the base colour
            scale = np.full(param.shape[1], lr * cfg.sh_rest_lr_factor)
            scale[0] = lr
            upd = upd * scale[None, :, None]
        else:
            upd = lr * upd
        param[live] -= upd
    cloud.rotations[live] = normalize_quats(cloud.rotations[live])
    return cloud, state


class DensifyStats:
    def __init__(self, n: int):
        self.grad_accum = np.zeros(n)
        self.denom = np.zeros(n)
        self.pos_grad = np.zeros((n, 3))
        self.max_radius = np.zeros(n)

    def add(self, grads: Gradients, radii: np.ndarray | None = None) -> None:
        vis = grads.visible
        self.grad_accum[vis] += grads.mean2d_norm[vis]
        self.denom[vis] += 1
        self.pos_grad[vis] += grads.positions[vis]
        if radii is not None:
            self.max_radius = np.maximum(self.max_radius, radii)

    def mean_grad(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            g = self.grad_accum / self.denom
        return np.nan_to_num(g)


class DensifyResult(NamedTuple):
    cloud: GaussianCloud
    origin: np.ndarray
    fresh: np.ndarray


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats, cfg: TrainConfig,
                      extent: float, rng: np.random.Generator) -> DensifyResult:
    """Clone small / split large high-gradient primitives, then prune faint ones.

    Returns the new cloud plus, for every output row, the input row it came
    from and whether it is newly created (its optimizer state restarts).
    """
    n = cloud.count
    live = ~cloud.frozen
    grad = stats.mean_grad()
    hot = live & (grad > cfg.densify_grad_threshold)
    max_scale = cloud.scales.max(axis=1) if n else np.zeros(0)
    small = max_scale <= cfg.split_scale_threshold * extent
    clone_idx = np.flatnonzero(hot & small)
    split_idx = np.flatnonzero(hot & ~small)

    keep = np.ones(n, bool)
    keep[split_idx] = False
    base_idx = np.flatnonzero(keep)
    parts = [cloud.subset(base_idx)]
    origin = [base_idx]
    fresh = [np.zeros(len(base_idx), bool)]

    if len(clone_idx):
        clones = cloud.subset(clone_idx)
        g = stats.pos_grad[clone_idx]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        clones.positions = clones.positions - direction * max_scale[clone_idx, None]
        parts.append(clones)
        origin.append(clone_idx)
        fresh.append(np.ones(len(clone_idx), bool))

    if len(split_idx):
        rep = np.repeat(split_idx, 2)
        kids = cloud.subset(rep)
        s = cloud.scales[rep]
        offsets = rng.normal(size=(len(rep), 3)) * s
        R = quat_to_rotmat(normalize_quats(cloud.rotations[rep]))
        kids.positions = kids.positions + np.einsum("nij,nj->ni", R, offsets)
        kids.log_scales = np.log(s / 1.6)
        parts.append(kids)
        origin.append(rep)
        fresh.append(np.ones(len(rep), bool))

    out = GaussianCloud.concatenate(parts)
    origin = np.concatenate(origin)
    fresh = np.concatenate(fresh)

    prune = (~out.frozen) & (out.opacities < cfg.prune_opacity_threshold)
    if cfg.prune_max_world_scale is not None:
        prune |= (~out.frozen) & (out.scales.max(axis=1) > cfg.prune_max_world_scale * extent)
    if cfg.prune_max_screen_size is not None:
        radius = stats.max_radius[origin]
        prune |= (~out.frozen) & ~fresh & (radius > cfg.prune_max_screen_size)
    survivors = np.flatnonzero(~prune)
    return DensifyResult(out.subset(survivors), origin[survivors], fresh[survivors])


def position_lr(cfg: TrainConfig, step: int, extent: float) -> float:
    max_steps = cfg.position_lr_max_steps or max(cfg.iterations, 1)
    t = np.clip(step / max_steps, 0.0, 1.0)
    lr = np.exp(np.log(cfg.position_lr_init) * (1 - t) + np.log(cfg.position_lr_final) * t)
    return float(lr * extent)


def _learning_rates(cfg: TrainConfig, step: int, extent: float) -> dict:
    return {"positions": position_lr(cfg, step, extent), "rotations": cfg.rotation_lr,
            "log_scales": cfg.scaling_lr, "logit_opacities": cfg.opacity_lr,
            "sh_coeffs": cfg.sh_lr}


def _check_views(views) -> list[View]:
    views = [v if isinstance(v, View) else View(*v) for v in views]
    if not views:
        raise InputError("training needs at least one view")
    for v in views:
        if v.image.shape != (v.camera.height, v.camera.width, 3):
            raise InputError(f"view {v.camera.id}: target {v.image.shape} does not match "
                             f"camera {v.camera.width}x{v.camera.height}")
        if v.mask is not None and np.shape(v.mask) != v.image.shape[:2]:
            raise InputError(f"view {v.camera.id}: mask shape does not match image")
    return views


def train(cloud: GaussianCloud, views, cfg: TrainConfig | None = None, *,
          callback=None, constraint=None) -> tuple[GaussianCloud, TrainReport]:
    """Optimise ``cloud`` against posed target images.

    Each view is an ``(camera, target, loss_mask)`` triple; the mask may be
    ``None``. Views are visited in a seeded shuffle, one epoch at a time.

    ``constraint(cloud)`` may return per-row flags of admissible primitives:
    an update that makes a row inadmissible is undone for that row, and
    inadmissible rows created by densification are dropped.

    ``callback(it, cloud, loss)`` runs after every iteration; a true return
    value ends training early.
    """
    cfg = cfg or TrainConfig()
    views = _check_views(views)
    cloud = cloud.copy()
    report = TrainReport()
    origin = np.arange(cloud.count)
    if cfg.iterations == 0:
        report.origin = origin
        return cloud, report
    extent = cfg.extent if cfg.extent is not None else scene_extent([v.camera for v in views])
    rng = np.random.default_rng(cfg.seed)
    split_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState(cloud)
    stats = DensifyStats(cloud.count)
    # the masked loss ignores everything outside the mask, so tiles without a
    # masked pixel need not be composited at all
    active = [None if v.mask is None else tiles_touching(v.mask, cfg.tile_size) for v in views]
    order: list[int] = []
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(views)))
        vi = order.pop(0)
        view = views[vi]
        out = render(cloud, view.camera, tile_size=cfg.tile_size, background=cfg.background,
                     active_tiles=active[vi])
        loss, grads = backward(out, cloud, view.image, view.mask, cfg.loss)
        if cfg.scale_penalty > 0 and cloud.count:
            s = cloud.scales
            loss += cfg.scale_penalty * float(s.sum(axis=1).mean())
            grads.log_scales += cfg.scale_penalty * s / cloud.count
            grads.log_scales[cloud.frozen] = 0.0
        if constraint is not None:
            before = {g: getattr(cloud, g).copy() for g in GROUPS}
        adam_step(cloud, grads, state, _learning_rates(cfg, it, extent), cfg)
        if constraint is not None:
            bad = ~cloud.frozen & ~np.asarray(constraint(cloud), bool)
            if bad.any():
                for g in GROUPS:
                    getattr(cloud, g)[bad] = before[g][bad]
                    state.m[g][bad] = 0.0
                    state.v[g][bad] = 0.0

        if cfg.densify and it <= cfg.densify_end:
            radii = np.zeros(cloud.count)
            sp = out.splats
            radii[sp.source_index] = 3.0 * np.sqrt(np.maximum(sp.cov2d[:, 0], sp.cov2d[:, 2]))
            stats.add(grads, radii)
            if it >= cfg.densify_start and it % cfg.densify_interval == 0:
                res = densify_and_prune(cloud, stats, cfg, extent, split_rng)
                cloud = res.cloud
                origin = origin[res.origin]
                state.remap(res.origin, res.fresh)
                if constraint is not None:
                    keep = np.flatnonzero(~res.fresh | np.asarray(constraint(cloud), bool))
                    if len(keep) < cloud.count:
                        cloud = cloud.subset(keep)
                        origin = origin[keep]
                        state.remap(keep, np.zeros(len(keep), bool))
                stats = DensifyStats(cloud.count)
        if cfg.opacity_reset_interval and it % cfg.opacity_reset_interval == 0 \
                and it < cfg.iterations:
            live = ~cloud.frozen
            cloud.logit_opacities[live] = np.minimum(cloud.logit_opacities[live], logit(0.01))
            state.m["logit_opacities"][live] = 0.0
            state.v["logit_opacities"][live] = 0.0
        if it % cfg.log_interval == 0 or it == cfg.iterations:
            report.iterations.append(it)
            report.loss.append(float(loss))
            report.count.append(cloud.count)
            report.psnr.append(psnr(out.image, view.image, view.mask))
            log.debug("iter %d loss %.5f n=%d", it, loss, cloud.count)
        if callback is not None and callback(it, cloud, loss):
            break
    report.wall_seconds = time.perf_counter() - t0
    report.origin = origin
    return cloud, report
