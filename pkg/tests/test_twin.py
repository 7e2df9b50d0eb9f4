import numpy as np
import pytest

from conftest import ring_cameras
from splattwin.damage import DamageClass, extract_mask
from splattwin.errors import InputError
from splattwin.gaussians import GaussianCloud, rgb_to_sh_dc
from splattwin.hierarchy import dilate
from splattwin.optimizer import TrainConfig
from splattwin.rasterizer import render_image
from splattwin.twin import (MIN_NEW_PIXELS, NEW_OFFSET, diff_masks, new_class_labels,
                            parent_labels, plan_update, recolor_progression,
                            render_segmentation_views, update_model, with_new_classes)

RED = DamageClass("spalling", (1.0, 0.0, 0.0))
BLUE = DamageClass("crack", (0.0, 0.0, 1.0))


def test_diff_masks_worked_example():
    old = np.zeros((6, 10), int)
    old[1:3, 1:3] = 1
    new = np.zeros((6, 10), int)
    new[1:4, 1:3] = 1  # grows by one row: within tolerance
    new[1:3, 8] = 1    # far away: new
    new[5, 0] = 2      # label 2 never existed: new
    d = diff_masks(new, old, tolerance_px=1)
    assert d.progression[3, 1] == 1 and d.progression[1, 1] == 1
    assert d.progression[1, 8] == NEW_OFFSET + 1
    assert d.progression[5, 0] == NEW_OFFSET + 2
    assert not d.shrinkage.any()
    d2 = diff_masks(np.zeros_like(old), old)
    assert d2.shrinkage.sum() == 4 and not d2.progression.any()
    with pytest.raises(InputError):
        diff_masks(new, old[:-1])


def test_diff_is_label_aware():
    old = np.zeros((4, 4), int)
    old[1, 1] = 1
    new = np.zeros((4, 4), int)
    new[1, 1] = 2
    d = diff_masks(new, old, 2)
    assert d.progression[1, 1] == NEW_OFFSET + 2 and d.shrinkage[1, 1]


def test_new_classes_keep_existing_labels():
    ext = with_new_classes([RED, BLUE], roots={2})
    assert [c.name for c in ext] == ["spalling", "crack", "new_crack"]
    assert ext[2].parent == "crack"
    np.testing.assert_array_equal(parent_labels(ext), [0, 1, 2, 2])
    assert new_class_labels(ext) == {2: 3}
    # idempotent: a second pass adds nothing
    assert with_new_classes(ext, roots={2}) == ext
    both = with_new_classes([RED, BLUE])
    assert len(both) == 4 and len({c.color for c in both}) == 4


def test_recolor_progression():
    ext = with_new_classes([RED, BLUE], roots={2})
    img = np.full((2, 3, 3), 0.5)
    prog = np.array([[0, 1, 2], [NEW_OFFSET + 2, 0, 0]])
    out = recolor_progression(img, prog, ext)
    np.testing.assert_array_equal(out[0, 1], RED.color)
    np.testing.assert_array_equal(out[0, 2], BLUE.color)
    np.testing.assert_array_equal(out[1, 0], ext[2].color)
    np.testing.assert_array_equal(out[1, 1], img[1, 1])
    with pytest.raises(InputError):
        recolor_progression(img, prog, [RED, BLUE])


def twin_scene():
    """A flat wall of overlapping splats with a red patch; a later survey adds a blue one."""
    g = np.arange(-0.6, 0.601, 0.1)
    xx, yy = np.meshgrid(g, g)
    pos = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    n = len(pos)
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rgb_to_sh_dc(np.array([0.5, 0.5, 0.5]))
    red = (pos[:, 0] > -0.55) & (pos[:, 0] < -0.25) & (np.abs(pos[:, 1] + 0.05) < 0.16)
    blue = (pos[:, 0] > 0.15) & (pos[:, 0] < 0.45) & (pos[:, 1] > -0.01) & (pos[:, 1] < 0.31)
    sh[red, 0] = rgb_to_sh_dc(np.array([1.0, 0.0, 0.0]))
    cloud = GaussianCloud(pos, np.tile([1.0, 0, 0, 0], (n, 1)),
                          np.log(np.tile([0.06, 0.06, 0.01], (n, 1))), np.full(n, 4.0), sh)
    cloud.damage_label[red] = 1
    later = cloud.copy()
    later.sh_coeffs[blue, 0] = rgb_to_sh_dc(np.array([0.0, 0.0, 1.0]))
    cams = ring_cameras(5, size=48)
    images = [render_image(later, c) for c in cams]
    masks = [extract_mask(img, [RED, BLUE]) for img in images]
    return cloud, cams, images, masks


def test_identical_survey_is_a_no_op():
    cloud, cams, _, _ = twin_scene()
    images = [render_image(cloud, c) for c in cams]
    masks = render_segmentation_views(cloud, cams, [RED, BLUE])
    plan = plan_update(cloud, cams, images, masks, [RED, BLUE])
    assert plan.new_pixels == 0
    out, rep = update_model(cloud, plan, [RED, BLUE])
    assert rep.no_op and out.equals(cloud)


def test_update_absorbs_new_damage_locally():
    cloud, cams, images, masks = twin_scene()
    classes = [RED, BLUE]
    plan = plan_update(cloud, cams, images, masks, classes)
    assert plan.new_pixels > 0
    cfg = TrainConfig(iterations=150, sh_lr=0.02)
    out, rep = update_model(cloud, plan, classes, cfg, "finetune", iterations=150)
    assert not rep.no_op and rep.rounds >= 1
    ext = rep.classes
    assert [c.name for c in ext] == ["spalling", "crack", "new_crack"]
    new_label = 3
    for cam, prog in zip(cams, plan.progression_masks):
        shown = extract_mask(render_image(out, cam), ext)
        before = render_image(cloud, cam)
        after = render_image(out, cam)
        # pre-existing damage is never relabelled; a few edge pixels may fade
        old = prog == 1
        assert not np.isin(shown[old], [2, new_label]).any()
        if old.any():
            assert np.mean(shown[old] == 1) > 0.85
        # new damage is rendered in the new colour, never in an old one
        new = prog >= NEW_OFFSET
        assert not np.isin(shown[new], [1, 2]).any()
        if new.sum() > 20:
            assert np.mean(shown[new] == new_label) > 0.4
        # pixels with neither old nor new damage stay free of damage colours
        clean = ~dilate(prog > 0, 4)
        assert not np.isin(shown[clean], [1, new_label]).any()
        assert np.abs(after - before)[clean].max() < 0.5
    assert rep.count_after == out.count == cloud.count
    # the survey is explained up to the diff tolerance: repeating is a no-op
    assert rep.residual_new_pixels < MIN_NEW_PIXELS
    again, rep2 = update_model(out, plan_update(out, cams, images, masks, ext), ext)
    assert rep2.no_op and again.equals(out)

