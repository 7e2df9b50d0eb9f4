import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import ring_cameras
from splattwin.damage import DamageClass, extract_mask
from splattwin.errors import InputError
from splattwin.estimators import DamageVisualizer, SplatReconstructor
from splattwin.gaussians import GaussianCloud, rgb_to_sh_dc
from splattwin.rasterizer import render_image

RED = DamageClass("spalling", (1.0, 0.0, 0.0))


def wall(color=(0.5, 0.5, 0.5)):
    g = np.arange(-0.6, 0.601, 0.1)
    xx, yy = np.meshgrid(g, g)
    pos = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    n = len(pos)
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rgb_to_sh_dc(np.array(color))
    return GaussianCloud(pos, np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.log(np.tile([0.06, 0.06, 0.01], (n, 1))), np.full(n, 4.0), sh)


def test_params_and_clone():
    est = DamageVisualizer(classes=[RED], iterations=5)
    params = est.get_params()
    assert params["iterations"] == 5 and params["classes"] == [RED]
    twin = clone(est)
    assert twin.get_params()["sh_lr"] == est.sh_lr and twin is not est
    with pytest.raises(NotFittedError):
        est.predict(ring_cameras(1))


def test_reconstructor_fits_and_scores():
    truth = wall()
    truth.sh_coeffs[::3, 0] = rgb_to_sh_dc(np.array([0.2, 0.6, 0.3]))
    cams = ring_cameras(4, size=32)
    views = [(c, render_image(truth, c)) for c in cams]
    est = SplatReconstructor(iterations=80, densify=False, sh_lr=0.02)
    after = est.fit(views, init=wall()).score(views)
    before = np.mean([10 * np.log10(1 / np.mean((render_image(wall(), c) - img) ** 2))
                      for c, img in views])
    assert after > before + 2
    assert est.n_primitives_ == truth.count
    assert est.transform(cams)[0].shape == (32, 32, 3)
    with pytest.raises(ValueError):
        SplatReconstructor().fit(views)


def test_damage_visualizer_predicts_masks():
    cams = ring_cameras(4, size=32)
    truth = wall()
    red = (wall().positions[:, 0] < -0.2) & (np.abs(wall().positions[:, 1]) < 0.25)
    truth.sh_coeffs[red, 0] = rgb_to_sh_dc(np.array([1.0, 0.0, 0.0]))
    masks = [extract_mask(render_image(truth, c), [RED]) for c in cams]
    images = [render_image(wall(), c) for c in cams]
    est = DamageVisualizer(classes=[RED], iterations=150, densify=False, sh_lr=0.03)
    est.fit(list(zip(cams, images)), masks, init=wall())
    assert est.score(cams, masks) > 0.6
    assert np.any(est.cloud_.damage_label == 1)
    assert not hasattr(est, "_masks")
    with pytest.raises(InputError):
        est.fit(list(zip(cams, images)), [m + 3 for m in masks], init=wall())
    assert not hasattr(est, "_masks")
