"""Photometric loss (L1 + SSIM, optionally masked) and the analytic backward pass.

Masking treats pixels outside the mask exactly like pixels outside the image:
both images are zeroed there before the SSIM window statistics are taken, and
only mask-true window centres are averaged. The loss is therefore a function
of in-mask pixels only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import _kernels
from .errors import ConsistencyError, InputError
from .gaussians import GaussianCloud, quat_rotmat_grad, sh_basis_grad, normalize_quats
from .rasterizer import RenderOutput, cloud_fingerprint


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def __post_init__(self):
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise InputError("lambda_ssim must lie in [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise InputError("ssim_window must be odd and >= 3")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(rendered, target, mask):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise InputError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != rendered.shape[:2]:
            raise InputError(f"mask shape {mask.shape} does not match image {rendered.shape[:2]}")
    return rendered, target, mask


def l1_loss(rendered, target, mask=None) -> float:
    """Mean absolute channel difference over mask-true pixels."""
    rendered, target, mask = _check_pair(rendered, target, mask)
    diff = np.abs(rendered - target)
    if mask is None:
        return float(diff.mean())
    n = int(mask.sum())
    if n == 0:
        return 0.0
    return float(diff[mask].sum() / (n * diff.shape[-1]))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img, kernel):
    out = correlate1d(img, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def _ssim_terms(x, y, cfg: LossConfig):
    k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    mx, my = _blur(x, k), _blur(y, k)
    exx, eyy, exy = _blur(x * x, k), _blur(y * y, k), _blur(x * y, k)
    A1 = 2 * mx * my + cfg.ssim_c1
    A2 = 2 * (exy - mx * my) + cfg.ssim_c2
    B1 = mx * mx + my * my + cfg.ssim_c1
    B2 = (exx - mx * mx) + (eyy - my * my) + cfg.ssim_c2
    return k, mx, my, A1, A2, B1, B2


def ssim_map(rendered, target, mask=None, cfg: LossConfig | None = None) -> np.ndarray:
    cfg = cfg or LossConfig()
    rendered, target, mask = _check_pair(rendered, target, mask)
    x, y = _masked(rendered, mask), _masked(target, mask)
    _, _, _, A1, A2, B1, B2 = _ssim_terms(x, y, cfg)
    return A1 * A2 / (B1 * B2)


def _masked(img, mask):
    return img if mask is None else img * mask[..., None]


def ssim(rendered, target, mask=None, cfg: LossConfig | None = None) -> float:
    """Mean windowed SSIM over mask-true centres (1.0 for an empty mask)."""
    cfg = cfg or LossConfig()
    rendered, target, mask = _check_pair(rendered, target, mask)
    if min(rendered.shape[:2]) < cfg.ssim_window:
        raise InputError(f"image {rendered.shape[:2]} is smaller than the SSIM window")
    smap = ssim_map(rendered, target, mask, cfg)
    if mask is None:
        return float(smap.mean())
    n = int(mask.sum())
    return 1.0 if n == 0 else float(smap[mask].sum() / (n * smap.shape[-1]))


def total_loss(rendered, target, mask=None, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    value = (1 - cfg.lambda_ssim) * l1_loss(rendered, target, mask)
    if cfg.lambda_ssim > 0:
        value += cfg.lambda_ssim * (1 - ssim(rendered, target, mask, cfg))
    return value


def loss_and_image_grad(rendered, target, mask=None, cfg: LossConfig | None = None):
    """Total loss and its gradient with respect to the rendered image."""
    cfg = cfg or LossConfig()
    rendered, target, mask = _check_pair(rendered, target, mask)
    if cfg.lambda_ssim > 0 and min(rendered.shape[:2]) < cfg.ssim_window:
        raise InputError(f"image {rendered.shape[:2]} is smaller than the SSIM window")
    if mask is None:
        return _loss_and_grad(rendered, target, None, cfg)
    rows = np.flatnonzero(mask.any(axis=1))
    if not len(rows):
        return 0.0, np.zeros_like(rendered)
    cols = np.flatnonzero(mask.any(axis=0))
    # SSIM windows centred in the mask reach at most half a window past it;
    # everything beyond is zero either way, so the crop is exact
    r = cfg.ssim_window // 2 if cfg.lambda_ssim > 0 else 0
    y0, y1 = max(rows[0] - r, 0), min(rows[-1] + r + 1, mask.shape[0])
    x0, x1 = max(cols[0] - r, 0), min(cols[-1] + r + 1, mask.shape[1])
    value, g = _loss_and_grad(rendered[y0:y1, x0:x1], target[y0:y1, x0:x1],
                              mask[y0:y1, x0:x1], cfg)
    grad = np.zeros_like(rendered)
    grad[y0:y1, x0:x1] = g
    return value, grad


def _loss_and_grad(rendered, target, mask, cfg: LossConfig):
    C = rendered.shape[-1]
    if mask is None:
        weight = np.full(rendered.shape[:2], 1.0 / (rendered.shape[0] * rendered.shape[1] * C))
    else:
        n = int(mask.sum())
        if n == 0:
            return 0.0, np.zeros_like(rendered)
        weight = mask / (n * C)
    lam = cfg.lambda_ssim
    diff = rendered - target
    l1 = float(np.sum(np.abs(diff) * weight[..., None]))
    grad = (1 - lam) * np.sign(diff) * weight[..., None]
    value = (1 - lam) * l1
    if lam > 0:
        x, y = _masked(rendered, mask), _masked(target, mask)
        k, mx, my, A1, A2, B1, B2 = _ssim_terms(x, y, cfg)
        S = A1 * A2 / (B1 * B2)
        value += lam * (1 - float(np.sum(S * weight[..., None])))
        w = -lam * np.broadcast_to(weight[..., None], S.shape)
        BB = B1 * B2
        d_mx = w * ((2 * my * A2 - 2 * my * A1) / BB - S * (2 * mx / B1 - 2 * mx / B2))
        d_exx = w * (-S / B2)
        d_exy = w * (2 * A1 / BB)
        gx = _blur(d_mx, k) + 2 * x * _blur(d_exx, k) + y * _blur(d_exy, k)
        if mask is not None:
            gx = gx * mask[..., None]
        grad = grad + gx
    return value, grad


@dataclass
class Gradients:
    """Per-primitive loss gradients, grouped like :class:`GaussianCloud`."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    mean2d_norm: np.ndarray  # screen-space gradient norm (NDC units) this view
    visible: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "Gradients":
        n = cloud.count
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros_like(cloud.sh_coeffs), np.zeros(n), np.zeros(n, bool))

    GROUPS = ("positions", "rotations", "log_scales", "logit_opacities", "sh_coeffs")

    def max_abs(self) -> float:
        return max((float(np.abs(getattr(self, g)).max(initial=0.0)) for g in self.GROUPS))


def splat_backward(out: RenderOutput, grad_img: np.ndarray) -> np.ndarray:
    """Per-splat gradients ``(mean_x, mean_y, conic a, b, c, alpha, r, g, b)``."""
    sp, bins = out.splats, out.bins
    entry = np.zeros((len(bins.indices), 9))
    _kernels.composite_backward(bins.offsets, bins.indices, bins.tiles_x, bins.tile_size,
                                sp.width, sp.height, sp.mean2d, sp.conic, sp.rgb, sp.alpha,
                                out.background, out.last_entry,
                                np.ascontiguousarray(grad_img, dtype=np.float64), entry)
    return _kernels.reduce_entries(bins.indices, entry, len(sp))


def _sym(packed_a, packed_b, packed_c):
    M = np.empty(packed_a.shape + (2, 2))
    M[..., 0, 0] = packed_a
    M[..., 0, 1] = M[..., 1, 0] = packed_b
    M[..., 1, 1] = packed_c
    return M


def chain_to_cloud(out: RenderOutput, cloud: GaussianCloud, sg: np.ndarray) -> Gradients:
    """Chain per-splat gradients through projection, covariance and SH."""
    sp = out.splats
    cam = out.camera
    grads = Gradients.zeros_like(cloud)
    if len(sp) == 0:
        return grads
    idx = sp.source_index
    g_mean = sg[:, 0:2]
    # conic packing stores the off-diagonal once, so its full-matrix share is half
    GQ = _sym(sg[:, 2], 0.5 * sg[:, 3], sg[:, 4])
    Q = _sym(sp.conic[:, 0], sp.conic[:, 1], sp.conic[:, 2])
    GC = -Q @ GQ @ Q
    J = sp.jacobians
    M = sp.cam_cov3
    GM = np.swapaxes(J, 1, 2) @ GC @ J
    GJ = 2.0 * GC @ J @ M
    Wr = cam.rotation
    GS = Wr.T @ GM @ Wr
    scales = np.exp(cloud.log_scales[idx])
    Rq = sp.rotmats
    A = Rq * scales[:, None, :]
    GA = 2.0 * GS @ A
    g_scale = np.einsum("nik,nik->nk", GA, Rq)
    grads.log_scales[idx] = g_scale * scales
    GR = GA * scales[:, None, :]
    q = cloud.rotations[idx]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / qn
    g_qh = quat_rotmat_grad(qh, GR)
    grads.rotations[idx] = (g_qh - qh * np.sum(qh * g_qh, axis=1, keepdims=True)) / qn

    t = sp.cam_points
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.einsum("nij,ni->nj", J, g_mean)
    g_t[:, 0] += GJ[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] += GJ[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] += (GJ[:, 0, 0] * (-fx / tz**2) + GJ[:, 0, 2] * (2 * fx * tx / tz**3)
                  + GJ[:, 1, 1] * (-fy / tz**2) + GJ[:, 1, 2] * (2 * fy * ty / tz**3))
    g_pos = g_t @ Wr

    alpha = sp.alpha
    grads.logit_opacities[idx] = sg[:, 5] * alpha * (1 - alpha)

    inside = (sp.rgb_raw >= 0.0) & (sp.rgb_raw <= 1.0)
    g_raw = sg[:, 6:9] * inside
    grads.sh_coeffs[idx, : sp.sh_basis.shape[1]] = sp.sh_basis[:, :, None] * g_raw[:, None, :]
    degree = cloud.sh_degree
    if degree > 0:
        coeffs = cloud.sh_coeffs[idx, : sp.sh_basis.shape[1]]
        g_basis = np.einsum("nkc,nc->nk", coeffs, g_raw)
        g_dir = np.einsum("nk,nkj->nj", g_basis, sh_basis_grad(sp.view_dirs, degree))
        d = sp.view_dirs
        g_dir = (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / sp.view_dist[:, None]
        g_pos = g_pos + g_dir
    grads.positions[idx] = g_pos

    grads.mean2d_norm[idx] = np.hypot(g_mean[:, 0] * 0.5 * sp.width,
                                      g_mean[:, 1] * 0.5 * sp.height)
    grads.visible[idx] = True

    frozen = cloud.frozen
    if frozen.any():
        for g in Gradients.GROUPS:
            getattr(grads, g)[frozen] = 0.0
        grads.mean2d_norm[frozen] = 0.0
        grads.visible[frozen] = False
    return grads


def backward(out: RenderOutput, cloud: GaussianCloud, target, mask=None,
             cfg: LossConfig | None = None) -> tuple[float, Gradients]:
    """Loss value and exact gradients for every primitive parameter."""
    if out.n_primitives != cloud.count or out.fingerprint != cloud_fingerprint(cloud):
        raise ConsistencyError("render output is stale: the cloud changed after rendering")
    value, g_img = loss_and_image_grad(out.image, target, mask, cfg)
    sg = splat_backward(out, g_img)
    return value, chain_to_cloud(out, cloud, sg)
