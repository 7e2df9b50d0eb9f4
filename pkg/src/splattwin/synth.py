"""Procedural facade scenes with exact damage masks, for tests and demos.

The facade is the rectangle ``|x| <= width/2, |y| <= height/2`` on the plane
``z = 0``; cameras sit on the ``z < 0`` side, so image x follows world x and
image y follows world y. Photographs are rendered by intersecting pixel rays
with the plane, which keeps them independent of the splatting renderer.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box

from .damage import DamageClass, save_classes, validate_classes
from .errors import ConfigError
from .gaussians import Camera, GaussianCloud, logit, rgb_to_sh_dc, rotmat_to_quat, sh_terms
from .io.colmap import ImagePose, Intrinsics, SparseModel, write_colmap_text
from .io.images import save_image, save_label_mask
from .io.ply import write_ply
from .rasterizer import render_image

SPALLING = DamageClass("spalling", (1.0, 0.0, 0.0))
CRACK = DamageClass("crack", (0.0, 0.0, 1.0))
NEW_CRACK = DamageClass("new_crack", (0.0, 1.0, 0.0), parent="crack")

WALL = (0.78, 0.72, 0.56)
SLAB = (0.58, 0.56, 0.50)
WINDOW = (0.30, 0.36, 0.46)
BACKGROUND = (0.0, 0.0, 0.0)
# how damage looks in the photographs, before any colour coding
DAMAGE_TONES = {"crack": (0.16, 0.16, 0.18), "spalling": (0.50, 0.46, 0.40)}
DEFAULT_TONE = (0.40, 0.38, 0.36)


@dataclass
class DamageRegion:
    """A planar damage region on the facade, in facade (x, y) coordinates.

    ``kind="crack"`` sweeps the polyline ``points`` to a band of ``width``;
    ``kind="polygon"`` uses ``points`` as the outline.
    """

    class_name: str
    points: list
    kind: str = "polygon"
    width: float = 0.08

    def __post_init__(self):
        self.points = [tuple(float(v) for v in p) for p in self.points]
        if self.kind not in ("polygon", "crack"):
            raise ConfigError(f"damage kind must be 'polygon' or 'crack', not {self.kind!r}")
        if self.kind == "crack" and (len(self.points) < 2 or not self.width > 0):
            raise ConfigError("a crack needs at least 2 points and a positive width")
        if self.kind == "polygon" and len(self.points) < 3:
            raise ConfigError("a polygon needs at least 3 points")

    @property
    def geometry(self):
        if self.kind == "crack":
            return LineString(self.points).buffer(self.width / 2.0)
        return Polygon(self.points).buffer(0)


def default_damage() -> list[DamageRegion]:
    return [
        DamageRegion("spalling", [(-1.35, 0.10), (-0.95, -0.05), (-0.65, 0.15),
                                  (-0.70, 0.55), (-1.05, 0.70), (-1.40, 0.45)]),
        DamageRegion("crack", [(0.20, -0.95), (0.45, -0.45), (0.40, 0.05), (0.75, 0.55),
                               (0.95, 1.05)], kind="crack", width=0.10),
    ]


def default_progression() -> list[DamageRegion]:
    # a widening wedge of crack damage, polygonal rather than swept
    return [DamageRegion("crack", [(-0.50, 0.45), (-0.20, 0.45), (-0.05, 0.80), (-0.10, 1.15),
                                   (-0.30, 1.05), (-0.50, 0.75)])]


@dataclass
class SynthSpec:
    facade_width: float = 4.0
    facade_height: float = 3.0
    floors: int = 3
    windows_per_floor: int = 4
    damage: list = field(default_factory=default_damage)
    classes: list = field(default_factory=lambda: [SPALLING, CRACK])
    n_cameras: int = 12
    radius: float = 5.0
    azimuth_range: tuple = (-40.0, 40.0)
    height_range: tuple = (-0.8, 0.8)
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 128
    height: int = 96
    focal: float = 1.25  # in units of image width
    n_points: int = 1500
    grid_spacing: float = 0.08
    seed: int = 0

    def __post_init__(self):
        self.damage = [d if isinstance(d, DamageRegion) else DamageRegion(**d)
                       for d in self.damage]
        self.classes = validate_classes(
            c if isinstance(c, DamageClass) else DamageClass(**c) for c in self.classes)
        names = {c.name for c in self.classes}
        if self.n_cameras < 2:
            raise ConfigError("need at least 2 cameras")
        if self.width < 8 or self.height < 8:
            raise ConfigError("image must be at least 8x8")
        if not (self.facade_width > 0 and self.facade_height > 0 and self.radius > 0):
            raise ConfigError("facade size and camera radius must be positive")
        facade = self.facade
        for d in self.damage:
            if d.class_name not in names:
                raise ConfigError(f"damage references unknown class {d.class_name}")
            if not facade.contains(d.geometry):
                raise ConfigError(f"{d.class_name} region extends beyond the facade")
        check_palette(self.classes)

    @property
    def facade(self):
        w, h = self.facade_width / 2.0, self.facade_height / 2.0
        return box(-w, -h, w, h)

    def label_of(self, class_name: str) -> int:
        return 1 + [c.name for c in self.classes].index(class_name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [dict(name=c.name, **c.to_dict()) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth spec fields: {', '.join(sorted(unknown))}")
        data = dict(data)
        for key in ("azimuth_range", "height_range", "look_at"):
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        try:
            with open(os.fspath(path), encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None


def palette_colors() -> np.ndarray:
    return np.array([WALL, SLAB, WINDOW, BACKGROUND, DEFAULT_TONE,
                     *DAMAGE_TONES.values()])


def check_palette(classes, min_gap: float = 0.4) -> None:
    """Reject class colours too close to anything the photographs contain."""
    cols = palette_colors()
    lo, hi = 1.0 - 0.06, 1.0 + 0.06  # bounds of the shading modulation
    for c in classes:
        for p in cols:
            if not np.any(p):
                gap = np.max(np.abs(np.asarray(c.color) - p))
            else:
                gap = min(np.max(np.abs(np.asarray(c.color) - p * s)) for s in (lo, hi))
            if gap < min_gap:
                raise ConfigError(f"class {c.name} colour is within {gap:.2f} of the facade palette")


def facade_color(spec: SynthSpec, x: np.ndarray, y: np.ndarray,
                 damage: list | None = None) -> np.ndarray:
    """Photograph colour at facade points (physical damage tones included)."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    out = np.empty(x.shape + (3,))
    out[:] = WALL
    H = spec.facade_height
    floor_h = H / spec.floors
    v = (y + H / 2.0) / floor_h  # floor coordinate
    frac = v - np.floor(v)
    slab = (np.minimum(frac, 1 - frac) * floor_h < 0.06) & (np.abs(y) < H / 2 - 1e-9)
    bay_w = spec.facade_width / spec.windows_per_floor
    u = (x + spec.facade_width / 2.0) / bay_w
    fu = u - np.floor(u)
    window = (np.abs(fu - 0.5) < 0.22) & (np.abs(frac - 0.55) < 0.2)
    out[window] = WINDOW
    out[slab] = SLAB
    for d in spec.damage if damage is None else damage:
        inside = shapely.contains_xy(d.geometry, x, y)
        out[inside] = DAMAGE_TONES.get(d.class_name, DEFAULT_TONE)
    shade = 1.0 + 0.06 * np.sin(1.7 * x + 0.4) * np.cos(1.3 * y - 0.2)
    return np.clip(out * shade[..., None], 0.0, 1.0)


def damage_labels(spec: SynthSpec, x, y, damage: list | None = None) -> np.ndarray:
    labels = np.zeros(np.shape(x), np.int64)
    for d in spec.damage if damage is None else damage:
        labels[shapely.contains_xy(d.geometry, x, y)] = spec.label_of(d.class_name)
    return labels


def camera_ring(spec: SynthSpec, n: int, *, azimuth_range=None, height_range=None,
                radius=None, phase: float = 0.0, prefix: str = "view") -> list[Camera]:
    az0, az1 = np.radians(azimuth_range or spec.azimuth_range)
    h0, h1 = height_range or spec.height_range
    r = radius or spec.radius
    target = np.asarray(spec.look_at, np.float64)
    f = spec.focal * spec.width
    cams = []
    for i in range(n):
        t = (i + 0.5 + phase) / n
        az = az0 + (az1 - az0) * t
        h = h0 + (h1 - h0) * (0.5 + 0.5 * np.sin(2.0 * np.pi * (2.0 * t + phase)))
        eye = np.array([r * np.sin(az), h, -r * np.cos(az)])
        cams.append(Camera.look_at(eye, target, fx=f, width=spec.width, height=spec.height,
                                   id=f"{prefix}{i:03d}"))
    return cams


def ray_hits(camera: Camera):
    """Facade-plane coordinates hit by each pixel ray and a validity mask."""
    rows, cols = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    d_cam = np.stack([(cols - camera.cx) / camera.fx, (rows - camera.cy) / camera.fy,
                      np.ones_like(cols)], axis=-1)
    d = d_cam @ camera.rotation  # rows of R^T d
    o = camera.center
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[..., 2]
    ok = np.isfinite(t) & (t > 0)
    t = np.where(ok, t, 0.0)
    return o[0] + t * d[..., 0], o[1] + t * d[..., 1], ok


def render_photo(spec: SynthSpec, camera: Camera, damage: list | None = None):
    """Analytic photograph and exact label mask for one camera."""
    x, y, ok = ray_hits(camera)
    on = ok & (np.abs(x) <= spec.facade_width / 2) & (np.abs(y) <= spec.facade_height / 2)
    img = np.empty(x.shape + (3,))
    img[:] = BACKGROUND
    img[on] = facade_color(spec, x[on], y[on], damage)
    labels = np.zeros(x.shape, np.int64)
    labels[on] = damage_labels(spec, x[on], y[on], damage)
    return img, labels


def gt_cloud(spec: SynthSpec, damage: list | None = None, sh_degree: int = 1) -> GaussianCloud:
    """Facade as a grid of flat, nearly opaque Gaussians."""
    s = spec.grid_spacing
    xs = np.arange(-spec.facade_width / 2 + s / 2, spec.facade_width / 2, s)
    ys = np.arange(-spec.facade_height / 2 + s / 2, spec.facade_height / 2, s)
    X, Y = (a.ravel() for a in np.meshgrid(xs, ys))
    n = len(X)
    pos = np.stack([X, Y, np.zeros(n)], axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    log_scales = np.tile(np.log([0.6 * s, 0.6 * s, 0.02 * s]), (n, 1))
    sh = np.zeros((n, sh_terms(sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(facade_color(spec, X, Y, damage))
    return GaussianCloud(pos, rot, log_scales, np.full(n, logit(0.95)), sh,
                         damage_label=damage_labels(spec, X, Y, damage))


def sparse_points(spec: SynthSpec, rng: np.random.Generator, damage: list | None = None):
    """Stand-in for an SfM point cloud: noisy samples of the facade surface."""
    n = spec.n_points
    x = rng.uniform(-spec.facade_width / 2, spec.facade_width / 2, n)
    y = rng.uniform(-spec.facade_height / 2, spec.facade_height / 2, n)
    colors = facade_color(spec, x, y, damage)
    pts = np.stack([x, y, np.zeros(n)], axis=1) + rng.normal(0.0, 0.005, (n, 3))
    return pts, colors


@dataclass
class SynthScene:
    spec: SynthSpec
    cameras: list
    images: list
    masks: list
    gt: GaussianCloud
    gs_images: list
    points: np.ndarray
    point_colors: np.ndarray

    @property
    def classes(self) -> list[DamageClass]:
        return self.spec.classes


@dataclass
class Progression:
    """A second survey of the same facade after new damage appeared."""

    base: SynthScene
    new_damage: list
    cameras: list
    images: list
    masks: list  # labels by class, old and new damage alike
    new_region_masks: list  # boolean, pixels of the new damage only

    @property
    def all_damage(self) -> list:
        return self.base.spec.damage + self.new_damage


def generate_scene(spec: SynthSpec | None = None) -> SynthScene:
    spec = spec or SynthSpec()
    rng = np.random.default_rng(spec.seed)
    cams = camera_ring(spec, spec.n_cameras)
    images, masks = zip(*(render_photo(spec, c) for c in cams))
    gt = gt_cloud(spec)
    gs_images = [render_image(gt, c) for c in cams]
    pts, cols = sparse_points(spec, rng)
    return SynthScene(spec, cams, list(images), list(masks), gt, gs_images, pts, cols)


def add_progression(scene: SynthScene, new_damage: list | None = None, n_views: int = 8,
                    **ring) -> Progression:
    """New survey views showing the old damage plus ``new_damage``."""
    spec = scene.spec
    new_damage = [d if isinstance(d, DamageRegion) else DamageRegion(**d)
                  for d in (default_progression() if new_damage is None else new_damage)]
    names = {c.name for c in spec.classes}
    for d in new_damage:
        if d.class_name not in names:
            raise ConfigError(f"new damage references unknown class {d.class_name}")
        if not spec.facade.contains(d.geometry):
            raise ConfigError("new damage extends beyond the facade")
        for old in spec.damage:
            if d.geometry.intersects(old.geometry):
                raise ConfigError(f"new {d.class_name} region overlaps existing damage")
    ring.setdefault("phase", 0.37)
    ring.setdefault("prefix", "survey")
    cams = camera_ring(spec, n_views, **ring)
    damage = spec.damage + new_damage
    images, masks, fresh = [], [], []
    for c in cams:
        img, lab = render_photo(spec, c, damage)
        x, y, ok = ray_hits(c)
        new_lab = damage_labels(spec, x, y, new_damage) if new_damage else np.zeros_like(lab)
        on = ok & (np.abs(x) <= spec.facade_width / 2) & (np.abs(y) <= spec.facade_height / 2)
        images.append(img)
        masks.append(lab)
        fresh.append((new_lab > 0) & on)
    return Progression(scene, new_damage, cams, images, masks, fresh)


def _model_for(cameras, start_id: int = 1) -> tuple[dict, list]:
    intr, poses = {}, []
    for i, c in enumerate(cameras, start=start_id):
        intr[i] = Intrinsics("PINHOLE", c.width, c.height, c.fx, c.fy, c.cx, c.cy)
        poses.append(ImagePose(i, f"{c.id}.png", i, rotmat_to_quat(c.rotation), c.translation))
    return intr, poses


def write_scene(scene: SynthScene, out_dir, progression: Progression | None = None) -> None:
    """Write the dataset in ingestion layout (COLMAP text, images, masks, classes).

    With a progression, its views join the same COLMAP model and are listed in
    ``new_survey.json``; ground-truth clouds go to ``gt.ply``.
    """
    out_dir = os.fspath(out_dir)
    for sub in ("sparse", "images", "masks", "gs_images", "new_damage_gt"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    cams = list(scene.cameras)
    if progression is not None:
        cams += progression.cameras
    intr, poses = _model_for(cams)
    ids = np.arange(1, len(scene.points) + 1)
    rgb = np.round(np.clip(scene.point_colors, 0, 1) * 255).astype(np.uint8)
    write_colmap_text(SparseModel(intr, poses, ids, scene.points, rgb),
                      os.path.join(out_dir, "sparse"))
    colors = [c.color for c in scene.classes]
    for c, img, m, g in zip(scene.cameras, scene.images, scene.masks, scene.gs_images):
        save_image(img, os.path.join(out_dir, "images", f"{c.id}.png"))
        save_label_mask(m, colors, os.path.join(out_dir, "masks", f"{c.id}.png"))
        save_image(g, os.path.join(out_dir, "gs_images", f"{c.id}.png"))
    save_classes(scene.classes, os.path.join(out_dir, "classes.json"))
    write_ply(scene.gt, os.path.join(out_dir, "gt.ply"))
    with open(os.path.join(out_dir, "synth_spec.json"), "w", encoding="utf-8") as fh:
        json.dump(scene.spec.to_dict(), fh, indent=2)
    if progression is not None:
        names = []
        for c, img, m, new in zip(progression.cameras, progression.images, progression.masks,
                                  progression.new_region_masks):
            save_image(img, os.path.join(out_dir, "images", f"{c.id}.png"))
            save_label_mask(m, colors, os.path.join(out_dir, "masks", f"{c.id}.png"))
            save_image(new.astype(np.float64),
                       os.path.join(out_dir, "new_damage_gt", f"{c.id}.png"))
            names.append(f"{c.id}.png")
        with open(os.path.join(out_dir, "new_survey.json"), "w", encoding="utf-8") as fh:
            json.dump({"images": names}, fh, indent=2)
