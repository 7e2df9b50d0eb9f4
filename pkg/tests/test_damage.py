import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splattwin.damage import (DamageClass, classify_colors, composite_mask, extract_mask,
                              inject_mask_errors, load_classes, mask_iou, save_classes,
                              validate_classes)
from splattwin.errors import ConfigError, InputError

RED = DamageClass("spalling", (1.0, 0.0, 0.0))
BLUE = DamageClass("crack", (0.0, 0.0, 1.0))


def test_class_validation():
    validate_classes([RED, BLUE])
    with pytest.raises(ConfigError):
        validate_classes([RED, DamageClass("near", (0.8, 0.1, 0.0))])
    with pytest.raises(ConfigError):
        validate_classes([RED, DamageClass("spalling", (0, 1, 0))])
    with pytest.raises(ConfigError):
        validate_classes([RED, DamageClass("x", (0, 1, 0), parent="ghost")])
    with pytest.raises(ConfigError):
        DamageClass("bad", (1.5, 0, 0))


def test_classes_file_roundtrip(tmp_path):
    classes = [RED, BLUE, DamageClass("new_crack", (0, 1, 0), 0.1, "crack")]
    save_classes(classes, tmp_path / "c.json")
    assert load_classes(tmp_path / "c.json") == classes
    (tmp_path / "s.json").write_text(json.dumps({"a": [1, 0, 0], "b": [0, 1, 0]}))
    assert [c.color for c in load_classes(tmp_path / "s.json")] == [(1, 0, 0), (0, 1, 0)]
    (tmp_path / "bad.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_classes(tmp_path / "bad.json")


def test_composite_then_extract_recovers_labels(rng):
    img = rng.uniform(0.3, 0.7, (10, 12, 3))
    img[..., 1] = 0.6  # keep the background far from pure red and blue
    labels = rng.integers(0, 3, (10, 12))
    out = composite_mask(img, labels, [RED, BLUE])
    np.testing.assert_array_equal(out[labels == 0], img[labels == 0])
    np.testing.assert_array_equal(extract_mask(out, [RED, BLUE]), labels)
    with pytest.raises(InputError):
        composite_mask(img, labels + 5, [RED, BLUE])


def test_classify_respects_tolerance():
    rgb = np.array([[0.9, 0.1, 0.1], [0.8, 0.0, 0.0], [0.0, 0.05, 0.9]])
    np.testing.assert_array_equal(classify_colors(rgb, [RED, BLUE]), [1, 0, 2])


def test_mask_iou():
    a = np.array([[1, 1, 0], [0, 2, 2]])
    b = np.array([[1, 0, 0], [0, 2, 0]])
    assert mask_iou(a, b, 1) == 0.5
    assert mask_iou(a, b, 2) == 0.5
    assert mask_iou(a, b, 3) == 1.0
    with pytest.raises(InputError):
        mask_iou(a, b[:1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_injected_errors(seed):
    mask = np.zeros((40, 50), np.int64)
    mask[10:25, 15:35] = 1
    noisy = inject_mask_errors(mask, seed)
    assert noisy.shape == mask.shape
    added = (noisy > 0) & (mask == 0)
    removed = (noisy == 0) & (mask > 0)
    assert added.any() and removed.any()
    np.testing.assert_array_equal(inject_mask_errors(mask, seed), noisy)
    assert set(np.unique(noisy)) <= {0, 1}
