import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation
from scipy.stats import multivariate_normal

from splattwin.errors import InputError, NumericalDomainError
from splattwin.gaussians import (SH_C0, Camera, GaussianCloud, covariance_3d, eval_sh,
                                 gaussian_density_3d, project_covariance, projection_jacobian,
                                 quat_to_rotmat, rgb_to_sh_dc, rotmat_to_quat, sh_basis,
                                 sh_basis_grad, sh_terms)

quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(
    lambda q: np.linalg.norm(q) > 0.1).map(lambda q: q / np.linalg.norm(q))
log_scales = arrays(np.float64, 3, elements=st.floats(-4, 1))


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


@given(quats)
def test_rotation_matches_scipy(q):
    expected = Rotation.from_quat(q[[1, 2, 3, 0]]).as_matrix()
    np.testing.assert_allclose(quat_to_rotmat(q), expected, atol=1e-12)


@given(quats)
def test_rotmat_to_quat_roundtrip(q):
    back = rotmat_to_quat(quat_to_rotmat(q))
    assert back[0] >= 0
    np.testing.assert_allclose(quat_to_rotmat(back), quat_to_rotmat(q), atol=1e-10)


@given(log_scales, quats)
def test_covariance_spectrum_is_squared_scales(s, q):
    cov = covariance_3d(s, q)
    np.testing.assert_allclose(cov, cov.T, atol=1e-15)
    eig = np.sort(np.linalg.eigvalsh(cov))
    np.testing.assert_allclose(eig, np.sort(np.exp(2 * s)), rtol=1e-7, atol=1e-14)


def test_identity_rotation_gives_diagonal_covariance():
    cov = covariance_3d(np.log([0.1, 0.2, 0.3]), np.array([1.0, 0, 0, 0]))
    np.testing.assert_allclose(cov, np.diag([0.01, 0.04, 0.09]), atol=1e-15)


def test_covariance_rejects_non_unit_quaternion():
    with pytest.raises(InputError):
        covariance_3d(np.zeros(3), np.array([2.0, 0, 0, 0]))


def test_density_matches_scipy(rng):
    cov = covariance_3d(np.log([0.3, 0.5, 0.2]), np.array([0.9, 0.1, -0.3, 0.2]) /
                        np.linalg.norm([0.9, 0.1, -0.3, 0.2]))
    mean = rng.normal(size=3)
    for _ in range(5):
        x = mean + rng.normal(scale=0.3, size=3)
        assert gaussian_density_3d(x, mean, cov) == pytest.approx(
            multivariate_normal(mean, cov).pdf(x), rel=1e-10)


def test_density_rejects_singular_covariance():
    with pytest.raises(NumericalDomainError):
        gaussian_density_3d(np.zeros(3), np.zeros(3), np.diag([1.0, 1.0, 0.0]))


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_sh_basis_is_orthonormal(degree):
    dirs = fibonacci_sphere(40000)
    Y = sh_basis(dirs, degree)
    gram = Y.T @ Y * (4 * np.pi / len(dirs))
    np.testing.assert_allclose(gram, np.eye(sh_terms(degree)), atol=2e-3)


def test_sh_basis_gradient_matches_differences(rng):
    d = rng.normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    G = sh_basis_grad(d, 3)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (sh_basis(d + e, 3) - sh_basis(d - e, 3)) / (2 * h)
        np.testing.assert_allclose(G[..., j], fd, atol=1e-6)


def test_dc_only_colour_is_view_independent():
    rgb = np.array([0.2, 0.5, 0.9])
    coeffs = np.zeros((4, 3))
    coeffs[0] = rgb_to_sh_dc(rgb)
    for d in fibonacci_sphere(7):
        np.testing.assert_allclose(eval_sh(coeffs, d), rgb, atol=1e-15)
    assert SH_C0 * coeffs[0, 0] + 0.5 == pytest.approx(0.2)


def test_eval_sh_clamps_and_validates():
    coeffs = np.zeros((1, 3))
    coeffs[0] = [10.0, -10.0, 0.0]
    np.testing.assert_allclose(eval_sh(coeffs, [0, 0, 1.0]), [1.0, 0.0, 0.5])
    with pytest.raises(InputError):
        eval_sh(coeffs, [0, 0, 2.0])
    with pytest.raises(InputError):
        eval_sh(coeffs, [0, 0, 1.0], degree=1)


def test_projection_jacobian_matches_differences():
    cam = Camera(50, 60, 15.5, 11.5, 32, 24)
    t = np.array([0.3, -0.2, 2.0])
    J = projection_jacobian(cam, t)

    def proj(p):
        return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])

    h = 1e-6
    fd = np.stack([(proj(t + h * e) - proj(t - h * e)) / (2 * h) for e in np.eye(3)], 1)
    np.testing.assert_allclose(J, fd, atol=1e-6)
    with pytest.raises(NumericalDomainError):
        projection_jacobian(cam, [0, 0, 0.001])


def test_project_covariance_adds_blur():
    J = np.array([[10.0, 0, 0], [0, 10.0, 0]])
    cov2 = project_covariance(J, np.eye(3), np.diag([0.01, 0.04, 1.0]), blur=0.3)
    np.testing.assert_allclose(cov2, [[1.3, 0], [0, 4.3]])


def test_look_at_centres_the_target():
    cam = Camera.look_at((1.0, -0.5, -4.0), (0.2, 0.1, 0.3), fx=40, width=33, height=25)
    R = cam.rotation
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    uv, z = cam.project(np.array([[0.2, 0.1, 0.3]]))
    np.testing.assert_allclose(uv[0], [16.0, 12.0], atol=1e-9)
    assert z[0] > 0
    np.testing.assert_allclose(cam.center, [1.0, -0.5, -4.0], atol=1e-12)


def test_downscaled_camera_maps_block_centres():
    cam = Camera.look_at((0.3, 0.2, -3.0), (0, 0, 0), fx=80, width=64, height=48)
    small = cam.downscaled(4)
    pts = np.array([[0.1, -0.2, 0.0], [0.4, 0.3, 0.2]])
    uv, _ = cam.project(pts)
    uv_s, _ = small.project(pts)
    np.testing.assert_allclose(uv_s, (uv - 1.5) / 4, atol=1e-12)
    assert small.shape == (12, 16)


@pytest.mark.parametrize("kwargs", [
    dict(rotation=np.diag([1.0, 1.0, -1.0])),
    dict(cx=40.0),
    dict(fx=0.0),
])
def test_camera_validation(kwargs):
    base = dict(fx=10.0, fy=10.0, cx=5.0, cy=5.0, width=10, height=10)
    base.update(kwargs)
    with pytest.raises(InputError):
        Camera(**base)


def test_cloud_container_ops(rng):
    from conftest import random_cloud
    a, b = random_cloud(rng, 4), random_cloud(rng, 3)
    both = GaussianCloud.concatenate([a, b])
    assert both.count == 7 and len(both) == 7
    assert both.subset(np.arange(4)).equals(a)
    c = a.copy()
    c.positions[0, 0] += 1
    assert not c.equals(a)
    with pytest.raises(InputError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros(2),
                      np.zeros((2, 5, 3)))
    bad = a.copy()
    bad.rotations[0] *= 2
    with pytest.raises(InputError):
        bad.validate()


@settings(max_examples=25)
@given(st.integers(0, 3))
def test_empty_cloud_has_degree(deg):
    assert GaussianCloud.empty(deg).sh_degree == deg
