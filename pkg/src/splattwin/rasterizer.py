"""Forward rendering: project, cull, tile-bin, depth-sort and alpha-composite."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .gaussians import (BLUR_2D, NEAR_PLANE, Camera, GaussianCloud, eval_sh_batch,
                        normalize_quats, quat_to_rotmat)

ALPHA_MAX = _kernels.ALPHA_MAX
ALPHA_MIN = _kernels.ALPHA_MIN
T_MIN = 1e-4
TILE_SIZE = 16


class Splat2D(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    inv_cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    alpha: float
    source_index: int


@dataclass
class Splats:
    """Projected primitives of one view, stored as parallel arrays.

    Besides the screen-space quantities, the intermediates needed by the
    backward pass (camera-frame centres, Jacobians, view directions, ...) are
    kept so gradients can be chained without re-projecting.
    """

    width: int
    height: int
    source_index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray  # packed (a, b, c) of [[a, b], [b, c]]
    conic: np.ndarray  # packed inverse of cov2d
    depth: np.ndarray
    rgb: np.ndarray
    alpha: np.ndarray
    cam_points: np.ndarray
    jacobians: np.ndarray
    cam_cov3: np.ndarray
    rotmats: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    rgb_raw: np.ndarray
    sh_basis: np.ndarray
    bbox: np.ndarray  # inclusive pixel range (x0, y0, x1, y1)

    def __len__(self) -> int:
        return len(self.source_index)

    def __getitem__(self, i: int) -> Splat2D:
        a, b, c = self.cov2d[i]
        ia, ib, ic = self.conic[i]
        return Splat2D(self.mean2d[i].copy(), np.array([[a, b], [b, c]]),
                       np.array([[ia, ib], [ib, ic]]), float(self.depth[i]),
                       self.rgb[i].copy(), float(self.alpha[i]), int(self.source_index[i]))


def project_and_cull(cloud: GaussianCloud, camera: Camera, *, blur: float = BLUR_2D,
                     near: float = NEAR_PLANE) -> Splats:
    """Splat every primitive in front of the near plane whose 3-sigma box
    covers at least one pixel centre of the image."""
    W, H = camera.width, camera.height
    t_all = cloud.positions @ camera.rotation.T + camera.translation
    keep = np.flatnonzero(t_all[:, 2] > near)
    t = t_all[keep]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    J = np.zeros((len(keep), 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    rotmats = quat_to_rotmat(normalize_quats(cloud.rotations[keep]))
    A = rotmats * np.exp(cloud.log_scales[keep])[:, None, :]
    cov3 = A @ np.swapaxes(A, 1, 2)
    Wr = camera.rotation
    cam_cov = Wr @ cov3 @ Wr.T
    cov2 = J @ cam_cov @ np.swapaxes(J, 1, 2)
    a = cov2[:, 0, 0] + blur
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + blur
    mean = np.stack([fx * tx / tz + camera.cx, fy * ty / tz + camera.cy], axis=1)
    rx, ry = 3.0 * np.sqrt(a), 3.0 * np.sqrt(c)
    x0 = np.maximum(np.ceil(mean[:, 0] - rx), 0)
    x1 = np.minimum(np.floor(mean[:, 0] + rx), W - 1)
    y0 = np.maximum(np.ceil(mean[:, 1] - ry), 0)
    y1 = np.minimum(np.floor(mean[:, 1] + ry), H - 1)
    det = a * c - b * b
    ok = (x0 <= x1) & (y0 <= y1) & (det > 0)
    sel = np.flatnonzero(ok)

    idx = keep[sel]
    a, b, c, det = a[sel], b[sel], c[sel], det[sel]
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    center = camera.center
    diff = cloud.positions[idx] - center
    dist = np.linalg.norm(diff, axis=1)
    dirs = diff / dist[:, None]
    rgb, raw, basis = eval_sh_batch(cloud.sh_coeffs[idx], dirs, cloud.sh_degree)
    bbox = np.stack([x0[sel], y0[sel], x1[sel], y1[sel]], axis=1).astype(np.int64)
    return Splats(W, H, idx, mean[sel], np.stack([a, b, c], axis=1), conic, tz[sel], rgb,
                  cloud.opacities[idx], t[sel], J[sel], cam_cov[sel], rotmats[sel], dirs,
                  dist, raw, basis, bbox)


@dataclass
class TileBins:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray
    indices: np.ndarray  # splat indices, depth-sorted inside each tile

    def tile(self, i: int) -> np.ndarray:
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    def lists(self) -> list[np.ndarray]:
        return [self.tile(i) for i in range(len(self.offsets) - 1)]


def depth_order(splats: Splats) -> np.ndarray:
    """Front-to-back order; ties broken by source index."""
    return np.lexsort((splats.source_index, splats.depth))


def tile_bin(splats: Splats, tile_size: int = TILE_SIZE) -> TileBins:
    """Assign splats to every tile their 3-sigma box overlaps."""
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    tiles_x = -(-splats.width // tile_size)
    tiles_y = -(-splats.height // tile_size)
    n_tiles = tiles_x * tiles_y
    order = depth_order(splats)
    rank = np.empty(len(order), np.int64)
    rank[order] = np.arange(len(order))
    tb = splats.bbox // tile_size
    nx = tb[:, 2] - tb[:, 0] + 1
    ny = tb[:, 3] - tb[:, 1] + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(splats)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tb[owner, 0] + local % nx[owner]
    ty = tb[owner, 1] + local // nx[owner]
    tile_id = ty * tiles_x + tx
    key = np.lexsort((rank[owner], tile_id))
    indices = owner[key].astype(np.int64)
    offsets = np.zeros(n_tiles + 1, np.int64)
    np.cumsum(np.bincount(tile_id, minlength=n_tiles), out=offsets[1:])
    return TileBins(tile_size, tiles_x, tiles_y, offsets, indices)


def tiles_touching(mask: np.ndarray, tile_size: int = TILE_SIZE) -> np.ndarray:
    """Flat per-tile flags: does the tile contain any true pixel of ``mask``."""
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    ty, tx = -(-h // tile_size), -(-w // tile_size)
    padded = np.zeros((ty * tile_size, tx * tile_size), bool)
    padded[:h, :w] = mask
    return padded.reshape(ty, tile_size, tx, tile_size).any(axis=(1, 3)).ravel()


def restrict_bins(bins: TileBins, active: np.ndarray) -> TileBins:
    """Drop the lists of inactive tiles; those tiles then render as background."""
    counts = np.diff(bins.offsets) * np.asarray(active, bool)
    keep = np.repeat(np.asarray(active, bool), np.diff(bins.offsets))
    offsets = np.zeros_like(bins.offsets)
    np.cumsum(counts, out=offsets[1:])
    return TileBins(bins.tile_size, bins.tiles_x, bins.tiles_y, offsets, bins.indices[keep])


def alpha_at_pixel(x, splat: Splat2D) -> float:
    """Opacity a splat contributes at pixel position ``x``.

    Zero outside the 3-sigma ellipse or below 1/255; capped at 0.99.
    """
    d = np.asarray(x, dtype=np.float64) - splat.mean2d
    Q = splat.inv_cov2d
    m2 = Q[0, 0] * d[0] * d[0] + 2.0 * Q[0, 1] * d[0] * d[1] + Q[1, 1] * d[1] * d[1]
    if m2 > _kernels.CUTOFF_M2:
        return 0.0
    a = min(splat.alpha * np.exp(-0.5 * m2), ALPHA_MAX)
    return 0.0 if a < ALPHA_MIN else float(a)


def composite_pixel(contributors, *, t_min: float = T_MIN, background=(0.0, 0.0, 0.0)):
    """Front-to-back blend of ``(rgb, alpha)`` pairs; returns ``(rgb, transmittance)``."""
    color = np.zeros(3)
    T = 1.0
    for rgb, a in contributors:
        if a < ALPHA_MIN:
            continue
        color += np.asarray(rgb, dtype=np.float64) * a * T
        T *= 1.0 - a
        if T < t_min:
            break
    return color + T * np.asarray(background, dtype=np.float64), T


def cloud_fingerprint(cloud: GaussianCloud) -> int:
    crc = 0
    for arr in (cloud.positions, cloud.rotations, cloud.log_scales, cloud.logit_opacities,
                cloud.sh_coeffs):
        crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
    return crc


@dataclass
class RenderOutput:
    """Rendered image plus what the backward pass needs to replay blending.

    ``last_entry[y, x]`` is the number of entries of the pixel's tile list that
    were visited up to and including its final contributor; together with the
    tile lists it replays every blend exactly.
    """

    image: np.ndarray
    final_transmittance: np.ndarray
    last_entry: np.ndarray
    median_depth: np.ndarray
    splats: Splats
    bins: TileBins
    background: np.ndarray
    camera: Camera
    fingerprint: int
    n_primitives: int

    @property
    def weights_sum(self) -> np.ndarray:
        return 1.0 - self.final_transmittance


def render(cloud: GaussianCloud, camera: Camera, *, tile_size: int = TILE_SIZE,
           background=(0.0, 0.0, 0.0), t_min: float = T_MIN, blur: float = BLUR_2D,
           near: float = NEAR_PLANE, active_tiles=None) -> RenderOutput:
    """Render one view.

    ``active_tiles`` (flat per-tile flags, see :func:`tiles_touching`) limits
    compositing to those tiles; the rest is left as plain background.
    """
    splats = project_and_cull(cloud, camera, blur=blur, near=near)
    bins = tile_bin(splats, tile_size)
    if active_tiles is not None:
        bins = restrict_bins(bins, active_tiles)
    H, W = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    img = np.empty((H, W, 3))
    T = np.empty((H, W))
    last = np.empty((H, W), np.int64)
    med = np.empty((H, W))
    _kernels.composite_forward(bins.offsets, bins.indices, bins.tiles_x, tile_size, W, H,
                               splats.mean2d, splats.conic, splats.rgb, splats.alpha,
                               splats.depth, bg, float(t_min), img, T, last, med)
    return RenderOutput(img, T, last, med, splats, bins, bg, camera,
                        cloud_fingerprint(cloud), cloud.count)


def render_image(cloud: GaussianCloud, camera: Camera, **kwargs) -> np.ndarray:
    return render(cloud, camera, **kwargs).image
