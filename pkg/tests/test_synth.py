import json

import numpy as np
import pytest

from splattwin.errors import ConfigError
from splattwin.io.colmap import parse_colmap_text
from splattwin.io.images import load_image, load_label_mask
from splattwin.io.ply import read_ply
from splattwin.rasterizer import render_image
from splattwin.synth import (DamageRegion, SynthSpec, add_progression, damage_labels,
                             generate_scene, gt_cloud, write_scene)


def small_spec(**kw):
    kw.setdefault("width", 48)
    kw.setdefault("height", 36)
    kw.setdefault("n_cameras", 3)
    kw.setdefault("n_points", 200)
    return SynthSpec(**kw)


def test_spec_validation():
    with pytest.raises(ConfigError):
        small_spec(n_cameras=1)
    with pytest.raises(ConfigError):
        small_spec(damage=[DamageRegion("rust", [(0, 0), (0.1, 0), (0, 0.1)])])
    with pytest.raises(ConfigError):
        small_spec(damage=[DamageRegion("crack", [(0, 0), (9, 0)], kind="crack")])
    with pytest.raises(ConfigError):
        DamageRegion("crack", [(0, 0), (1, 1)])
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"bogus": 1})
    spec = small_spec()
    assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_damage_labels_follow_the_regions():
    spec = small_spec()
    spall, crack = spec.damage
    c = spall.geometry.representative_point()
    assert damage_labels(spec, np.array([c.x]), np.array([c.y]))[0] == spec.label_of("spalling")
    c = crack.geometry.representative_point()
    assert damage_labels(spec, np.array([c.x]), np.array([c.y]))[0] == spec.label_of("crack")
    assert damage_labels(spec, np.array([1.9]), np.array([-1.4]))[0] == 0


def test_scene_is_consistent_and_deterministic():
    spec = small_spec()
    a, b = generate_scene(spec), generate_scene(spec)
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.points, b.points)
    assert len(a.cameras) == len(a.masks) == 3
    for img, m in zip(a.images, a.masks):
        assert img.shape == (36, 48, 3) and m.shape == (36, 48)
        assert {1, 2} <= set(np.unique(m))
    # stored ground-truth renders come from the ground-truth cloud
    for cam, img in zip(a.cameras, a.gs_images):
        np.testing.assert_array_equal(render_image(gt_cloud(spec), cam), img)


def test_progression_marks_only_new_damage():
    scene = generate_scene(small_spec())
    prog = add_progression(scene, n_views=2)
    assert len(prog.cameras) == 2
    for m, new in zip(prog.masks, prog.new_region_masks):
        assert new.any()
        assert np.all(m[new] == scene.spec.label_of("crack"))
    with pytest.raises(ConfigError):
        add_progression(scene, [DamageRegion("crack", scene.spec.damage[0].points)])


def test_written_layout(tmp_path):
    scene = generate_scene(small_spec())
    prog = add_progression(scene, n_views=2)
    write_scene(scene, tmp_path, prog)
    model = parse_colmap_text(tmp_path / "sparse")
    assert len(model.images) == 5
    survey = json.loads((tmp_path / "new_survey.json").read_text())["images"]
    assert len(survey) == 2 and all((tmp_path / "images" / n).exists() for n in survey)
    cam = model.camera(survey[0])
    np.testing.assert_allclose(cam.rotation, prog.cameras[0].rotation, atol=1e-12)
    img = load_image(tmp_path / "images" / survey[0])
    np.testing.assert_allclose(img, np.round(prog.images[0] * 255) / 255, atol=1e-12)
    colors = [c.color for c in scene.classes]
    m = load_label_mask(tmp_path / "masks" / f"{scene.cameras[0].id}.png", colors)
    np.testing.assert_array_equal(m, scene.masks[0])
    assert read_ply(tmp_path / "gt.ply").count == scene.gt.count
