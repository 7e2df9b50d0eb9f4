"""Independent reference implementations used as test oracles.

Nothing here calls into the package's rendering code; the math is re-derived
with plain numpy, scipy's rotation conventions and shapely.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation
from shapely.geometry import MultiPoint, box

C0 = 0.28209479177387814
C1 = 0.4886025119029199
CUTOFF = 9.0
A_MAX = 0.99
A_MIN = 1.0 / 255.0


def rotation_matrices(quats_wxyz):
    q = np.asarray(quats_wxyz, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    return Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()


def sh_color_raw(sh, dirs):
    """Degree 0/1 real SH colour before clamping (``(N, 3)``)."""
    k = sh.shape[1]
    if k not in (1, 4):
        raise ValueError("oracle supports SH degree 0 and 1 only")
    out = C0 * sh[:, 0] + 0.5
    if k == 4:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        out = out - C1 * y * sh[:, 1] + C1 * z * sh[:, 2] - C1 * x * sh[:, 3]
    return out


def project(params, cam, blur=0.3, near=0.01):
    """Screen-space means, 2x2 covariances, depths and raw colours."""
    pos, quat, logs, logit_op, sh = params
    R = rotation_matrices(quat)
    S = np.exp(logs)
    cov3 = np.einsum("nij,nj,nkj->nik", R, S**2, R)
    t = pos @ cam.rotation.T + cam.translation
    out = []
    for i in range(len(pos)):
        x, y, z = t[i]
        J = np.array([[cam.fx / z, 0, -cam.fx * x / z**2], [0, cam.fy / z, -cam.fy * y / z**2]])
        M = J @ cam.rotation
        cov2 = M @ cov3[i] @ M.T + blur * np.eye(2)
        mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        out.append((mean, cov2))
    center = -cam.rotation.T @ cam.translation
    d = pos - center
    dirs = d / np.linalg.norm(d, axis=1, keepdims=True)
    return out, t[:, 2], sh_color_raw(sh, dirs), 1 / (1 + np.exp(-logit_op)), t[:, 2] > near


def naive_render(params, cam, background=(0.0, 0.0, 0.0), t_min=1e-4, pieces=None):
    """Front-to-back compositing of every primitive at every pixel centre.

    ``pieces`` (the third value returned by an unpinned call) pins every
    discrete decision so the output is smooth in the parameters.
    Returns ``(image, median_depth, pieces)``.
    """
    H, W = cam.height, cam.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    proj, depth, raw, op, front = project(params, cam)
    if pieces is None:
        order = [i for i in np.lexsort((np.arange(len(depth)), depth)) if front[i]]
        color_clip = (raw < 0) | (raw > 1)
        rec = {"order": order, "use": {}, "clamp": {}, "color_clip": color_clip}
    else:
        rec = pieces
        order = rec["order"]
        color_clip = rec["color_clip"]
    rgb = np.where(color_clip, np.clip(raw if pieces is None else rec["color_val"], 0, 1), raw)
    if pieces is None:
        rec["color_val"] = np.clip(raw, 0, 1)
    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    done = np.zeros((H, W), bool)
    med = np.full((H, W), np.inf)
    for i in order:
        mean, cov2 = proj[i]
        inv = np.linalg.inv(cov2)
        dx, dy = xx - mean[0], yy - mean[1]
        m2 = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        a = op[i] * np.exp(-0.5 * m2)
        if pieces is None:
            clamp = a > A_MAX
            use = (m2 <= CUTOFF) & (np.minimum(a, A_MAX) >= A_MIN) & ~done
            rec["use"][i], rec["clamp"][i] = use, clamp
        else:
            use, clamp = rec["use"][i], rec["clamp"][i]
        a = np.where(clamp, A_MAX, a) * use
        img += (a * T)[..., None] * rgb[i]
        T = T * (1 - a)
        med = np.where(use & (T < 0.5) & np.isinf(med), depth[i], med)
        if pieces is None:
            done |= use & (T < t_min)
    img += T[..., None] * np.asarray(background, dtype=np.float64)
    return img, med, rec


def cloud_params(cloud):
    return [cloud.positions.copy(), cloud.rotations.copy(), cloud.log_scales.copy(),
            cloud.logit_opacities.copy(), cloud.sh_coeffs.copy()]


def fd_gradients(cloud, cam, loss_fn, h=1e-4):
    """Central differences of ``loss_fn(image)`` over every parameter, through
    the naive renderer with its discrete pieces frozen at ``cloud``."""
    params = cloud_params(cloud)
    _, _, pieces = naive_render(params, cam)
    grads = []
    for g, arr in enumerate(params):
        out = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            hi = [p.copy() for p in params]
            lo = [p.copy() for p in params]
            hi[g][idx] += h
            lo[g][idx] -= h
            f1 = loss_fn(naive_render(hi, cam, pieces=pieces)[0])
            f0 = loss_fn(naive_render(lo, cam, pieces=pieces)[0])
            out[idx] = (f1 - f0) / (2 * h)
        grads.append(out)
    return grads


def brute_ssim(x, y, mask=None, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Mean SSIM over mask-true centres with explicit zero-padded windows."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    H, W, C = x.shape
    if mask is not None:
        x = x * mask[..., None]
        y = y * mask[..., None]
    r = window // 2
    g = np.exp(-((np.arange(window) - r) ** 2) / (2 * sigma**2))
    g /= g.sum()
    w2 = np.outer(g, g)
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    yp = np.pad(y, ((r, r), (r, r), (0, 0)))
    vals = []
    for i in range(H):
        for j in range(W):
            if mask is not None and not mask[i, j]:
                continue
            for ch in range(C):
                a = xp[i:i + window, j:j + window, ch]
                b = yp[i:i + window, j:j + window, ch]
                mx, my = (w2 * a).sum(), (w2 * b).sum()
                vx = (w2 * a * a).sum() - mx * mx
                vy = (w2 * b * b).sum() - my * my
                cxy = (w2 * a * b).sum() - mx * my
                vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals)) if vals else 1.0


def projection_votes_oracle(positions, labels, masks, cams, medians, dilated, margin):
    """Per-primitive vote counts from an explicit loop over views and points.

    ``dilated[v][k]`` is the dilated mask of label ``k`` in view ``v``;
    ``medians[v]`` the median-depth image of view ``v``.
    """
    votes = np.zeros(len(positions), int)
    for v, cam in enumerate(cams):
        for i, p in enumerate(positions):
            if labels[i] <= 0:
                continue
            t = cam.rotation @ p + cam.translation
            if t[2] <= 0.01:
                continue
            u = cam.fx * t[0] / t[2] + cam.cx
            w = cam.fy * t[1] / t[2] + cam.cy
            col, row = int(np.rint(u)), int(np.rint(w))
            if not (0 <= col < cam.width and 0 <= row < cam.height):
                continue
            region = dilated[v].get(labels[i])
            if region is None or not region[row, col]:
                continue
            if t[2] <= medians[v][row, col] + margin:
                votes[i] += 1
    return votes


def hull_pixels_oracle(points, shape):
    """Pixels whose unit square meets the convex hull of ``points`` (shapely)."""
    hull = MultiPoint([tuple(p) for p in points]).convex_hull
    h, w = shape
    out = np.zeros(shape, bool)
    for r in range(h):
        for c in range(w):
            out[r, c] = box(c - 0.5, r - 0.5, c + 0.5, r + 0.5).intersects(hull)
    return out


def frozen_loss(target, mask, base_image, lambda_ssim=0.2, ssim_fn=None):
    """``(1-l) L1 + l (1 - SSIM)`` with the L1 sign pattern pinned at
    ``base_image``, so the L1 term stays smooth inside a finite-difference
    stencil. ``ssim_fn(image, target, mask)`` supplies the SSIM term."""
    target = np.asarray(target, float)
    sign = np.sign(base_image - target)
    m = np.ones(target.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    n = m.sum() * target.shape[2]

    def fn(image):
        l1 = float((sign * (image - target))[m].sum() / n) if n else 0.0
        val = (1 - lambda_ssim) * l1
        if lambda_ssim:
            val += lambda_ssim * (1 - ssim_fn(image, target, mask))
        return val

    return fn
