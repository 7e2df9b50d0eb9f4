"""Gaussian primitives, pinhole cameras and the closed-form splatting math.

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)``;
* scales are stored as ``log`` of the per-axis standard deviation and
  opacities as logits, so unconstrained optimizer steps keep them valid;
* cameras follow the OpenCV/COLMAP frame (x right, y down, z forward) and
  pixel ``(col, row)`` is sampled at image-plane coordinate ``(col, row)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalDomainError

NEAR_PLANE = 0.01
BLUR_2D = 0.3
UNIT_TOL = 1e-6

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_terms(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_of(n_terms: int) -> int:
    degree = int(round(np.sqrt(n_terms))) - 1
    if degree < 0 or degree > 3 or sh_terms(degree) != n_terms:
        raise InputError(f"{n_terms} SH terms is not a valid block (degrees 0-3)")
    return degree


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape ``(N, (degree+1)**2)``, for unit ``dirs``."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], sh_terms(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives of :func:`sh_basis` w.r.t. ``(x, y, z)``; ``(N, K, 3)``."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = dirs.shape[0]
    g = np.zeros((n, sh_terms(degree), 3))
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = -2 * SH_C2[2] * x
        g[:, 6, 1] = -2 * SH_C2[2] * y
        g[:, 6, 2] = 4 * SH_C2[2] * z
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = 2 * SH_C2[4] * x
        g[:, 8, 1] = -2 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = SH_C3[0] * 6 * x * y
        g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = SH_C3[2] * 8 * y * z
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * 8 * x * z
        g[:, 14, 0] = SH_C3[5] * 2 * x * z
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g


def eval_sh(coeffs, view_dir, degree: int | None = None) -> np.ndarray:
    """Evaluate one primitive's SH colour block toward ``view_dir``.

    ``coeffs`` has shape ``(K, 3)``. The band-0 term is offset by +0.5 and the
    result clamped to ``[0, 1]``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != 3:
        raise InputError(f"SH block must have shape (K, 3), got {coeffs.shape}")
    stored = sh_degree_of(coeffs.shape[0])
    degree = stored if degree is None else degree
    if degree > stored or degree < 0:
        raise InputError(f"SH degree {degree} exceeds stored degree {stored}")
    d = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise InputError("view direction must be unit length")
    basis = sh_basis(d[None], degree)[0]
    raw = basis @ coeffs[: sh_terms(degree)] + 0.5
    return np.clip(raw, 0.0, 1.0)


def eval_sh_batch(coeffs: np.ndarray, dirs: np.ndarray, degree: int):
    """Vectorized colour evaluation; returns ``(rgb_clamped, rgb_raw, basis)``."""
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, coeffs[:, : basis.shape[1]]) + 0.5
    return np.clip(raw, 0.0, 1.0), raw, basis


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (batched) unit quaternions ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_grad(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``R(q)`` back to the (unit) quaternion components."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def normalize_quats(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def covariance_3d(log_scale, rotation) -> np.ndarray:
    """World-space covariance ``R S S^T R^T`` of one primitive (3x3, symmetric)."""
    q = np.asarray(rotation, dtype=np.float64)
    if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise InputError("rotation must be a unit quaternion (w, x, y, z)")
    return covariances_3d(np.asarray(log_scale, dtype=np.float64)[None], q[None])[0]


def covariances_3d(log_scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    A = quat_to_rotmat(quats) * np.exp(log_scales)[:, None, :]
    return A @ np.swapaxes(A, 1, 2)


def gaussian_density_3d(X, mean, cov) -> float:
    """Normalized trivariate Gaussian density at ``X``."""
    cov = np.asarray(cov, dtype=np.float64)
    det = np.linalg.det(cov)
    if not det > 1e-18:
        raise NumericalDomainError(f"covariance is singular (det={det:.3g})")
    d = np.asarray(X, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    m2 = d @ np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * m2) / ((2 * np.pi) ** 1.5 * np.sqrt(det)))


def world_to_camera(camera: "Camera", point) -> np.ndarray:
    return camera.rotation @ np.asarray(point, dtype=np.float64) + camera.translation


def projection_jacobian(camera: "Camera", cam_point, near: float = NEAR_PLANE) -> np.ndarray:
    """2x3 Jacobian of the pinhole projection at a camera-frame point."""
    tx, ty, tz = np.asarray(cam_point, dtype=np.float64)
    if tz <= near:
        raise NumericalDomainError(f"depth {tz:g} is not beyond the near plane {near:g}")
    return np.array([
        [camera.fx / tz, 0.0, -camera.fx * tx / tz**2],
        [0.0, camera.fy / tz, -camera.fy * ty / tz**2],
    ])


def project_covariance(J, cam_rotation, cov3, blur: float = BLUR_2D) -> np.ndarray:
    """Screen-space covariance ``J W Sigma W^T J^T + blur*I`` (2x2)."""
    T = np.asarray(J, dtype=np.float64) @ np.asarray(cam_rotation, dtype=np.float64)
    cov2 = T @ np.asarray(cov3, dtype=np.float64) @ T.T
    return cov2 + blur * np.eye(2)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


NO_DAMAGE = 0


@dataclass
class GaussianCloud:
    """Structure-of-arrays container for ``N`` Gaussian primitives.

    ``damage_label`` is 0 for undamaged primitives and ``k + 1`` for damage
    class ``k``; the same encoding is used by label masks.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    frozen: np.ndarray = None
    damage_label: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.logit_opacities = np.asarray(self.logit_opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise InputError(f"sh_coeffs must have shape (N, K, 3), got {sh.shape}")
        sh_degree_of(sh.shape[1])
        self.sh_coeffs = sh
        self.frozen = (np.zeros(n, bool) if self.frozen is None
                       else np.asarray(self.frozen, dtype=bool).reshape(n))
        self.damage_label = (np.zeros(n, np.int64) if self.damage_label is None
                             else np.asarray(self.damage_label, dtype=np.int64).reshape(n))

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, sh_terms(sh_degree), 3)))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(self.sh_coeffs.shape[1])

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.logit_opacities)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return covariances_3d(self.log_scales, normalize_quats(self.rotations))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.positions.copy(), self.rotations.copy(),
                             self.log_scales.copy(), self.logit_opacities.copy(),
                             self.sh_coeffs.copy(), self.frozen.copy(),
                             self.damage_label.copy())

    def subset(self, idx) -> "GaussianCloud":
        idx = np.asarray(idx)
        return GaussianCloud(self.positions[idx], self.rotations[idx], self.log_scales[idx],
                             self.logit_opacities[idx], self.sh_coeffs[idx],
                             self.frozen[idx], self.damage_label[idx])

    @staticmethod
    def concatenate(clouds) -> "GaussianCloud":
        clouds = list(clouds)
        return GaussianCloud(*(np.concatenate([getattr(c, f) for c in clouds])
                               for f in _FIELDS))

    def validate(self) -> None:
        n = self.count
        for name in _FIELDS:
            if len(getattr(self, name)) != n:
                raise InputError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        norms = np.linalg.norm(self.rotations, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise InputError("rotations must be unit quaternions")
        if not np.all(np.isfinite(self.positions)):
            raise InputError("non-finite positions")
        if np.any(self.damage_label < 0):
            raise InputError("negative damage label")

    def equals(self, other: "GaussianCloud") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _FIELDS)


_FIELDS = ("positions", "rotations", "log_scales", "logit_opacities", "sh_coeffs",
           "frozen", "damage_label")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    id: str = "0"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        self.id = str(self.id)
        self.validate()

    def validate(self) -> None:
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0:
            raise InputError(f"camera {self.id}: rotation is not a proper orthonormal matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"camera {self.id}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InputError(f"camera {self.id}: image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError(f"camera {self.id}: principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def project(self, points: np.ndarray):
        """Pixel coordinates and depths of world points, ``((N, 2), (N,))``."""
        t = np.atleast_2d(points) @ self.rotation.T + self.translation
        z = t[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * t[:, 0] / z + self.cx, self.fy * t[:, 1] / z + self.cy], 1)
        return uv, z

    def downscaled(self, factor: int) -> "Camera":
        """Camera for an image box-filtered by ``factor`` (floor dimensions)."""
        f = int(factor)
        off = (f - 1) / 2.0
        return Camera(self.fx / f, self.fy / f, (self.cx - off) / f, (self.cy - off) / f,
                      self.width // f, self.height // f, self.rotation, self.translation,
                      self.id)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), *, fx, fy=None, width, height,
                cx=None, cy=None, id="0") -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        # image y points down, so the camera's y axis is the negated world up
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise InputError("look_at: up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy if fy is not None else fx,
                   (width - 1) / 2.0 if cx is None else cx,
                   (height - 1) / 2.0 if cy is None else cy,
                   width, height, R, -R @ eye, id)
