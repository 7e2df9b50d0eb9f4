import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from splattwin.gaussians import Camera, GaussianCloud, logit  # noqa: E402


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n=5, sh_degree=1, spread=0.5, scale=(0.05, 0.2), opacity=(0.3, 0.9)):
    k = (sh_degree + 1) ** 2
    pos = rng.uniform(-spread, spread, (n, 3)) * [1.0, 1.0, 0.6]
    return GaussianCloud(pos, random_quats(rng, n), np.log(rng.uniform(*scale, (n, 3))),
                         logit(rng.uniform(*opacity, n)), rng.normal(0, 0.4, (n, k, 3)))


def front_camera(size=16, distance=3.0, focal=1.6, cam_id="c0"):
    """Camera on the -z axis looking at the origin."""
    return Camera.look_at((0.0, 0.0, -distance), (0.0, 0.0, 0.0), fx=focal * size,
                          width=size, height=size, id=cam_id)


def ring_cameras(n=6, size=32, radius=3.0, focal=1.4):
    cams = []
    for i, az in enumerate(np.linspace(-0.6, 0.6, n)):
        eye = (radius * np.sin(az), 0.3 * np.cos(3 * az), -radius * np.cos(az))
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), fx=focal * size, width=size,
                                   height=size, id=f"c{i}"))
    return cams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
