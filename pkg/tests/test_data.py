import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autosegloss.data import (
    SceneParams, dataset_digest, gen_dataset, gen_scene, read_dataset, read_features_bin,
    read_mask_pgm, write_dataset, write_features_bin, write_mask_pgm,
)
from autosegloss.errors import ConfigError, ParseError
from autosegloss.metrics import LabelMask


def test_scene_determinism_and_independence_from_count():
    a = gen_scene(5, index=3)
    b = gen_scene(5, index=3)
    assert write_features_bin(a.features) == write_features_bin(b.features)
    assert a.mask == b.mask
    small, large = gen_dataset(5, 8), gen_dataset(5, 40)
    scenes_small = dict(zip(small.train_ids + small.hold_out_ids, small.train + small.hold_out))
    scenes_large = dict(zip(large.train_ids + large.hold_out_ids, large.train + large.hold_out))
    for i in range(8):
        np.testing.assert_array_equal(scenes_small[i].features, scenes_large[i].features)


def test_zero_imbalance_is_pure_background():
    s = gen_scene(0, imbalance=0.0, index=0)
    assert not s.mask.labels.any()


def test_feature_layout():
    s = gen_scene(0, size_px=10, num_classes=4, index=0)
    assert s.features.shape == (10, 10, 6)
    np.testing.assert_allclose(s.features[:, 0, -2], np.linspace(-1, 1, 10))
    np.testing.assert_allclose(s.features[0, :, -1], np.linspace(-1, 1, 10))


@pytest.mark.parametrize("imb", [0.05, 0.1, 0.2, 0.4])
def test_foreground_fraction_tracks_request(imb):
    fr = [np.mean(gen_scene(s, size_px=16, imbalance=imb, index=0).mask.labels > 0) for s in range(100)]
    assert abs(np.mean(fr) - imb) <= 0.2 * imb


def test_background_dominates_at_default_imbalance():
    bg = [np.mean(gen_scene(s, index=0).mask.labels == 0) for s in range(100)]
    assert np.mean(bg) >= 0.8 * 0.95


def test_labels_below_class_count():
    for s in range(30):
        sc = gen_scene(s, num_classes=5, imbalance=0.5, index=0)
        assert sc.mask.labels.max() < 5


def test_split_sizes_and_disjointness():
    d = gen_dataset(1, 100)
    assert len(d.train) == 75 and len(d.hold_out) == 25
    assert not set(d.train_ids) & set(d.hold_out_ids)
    assert sorted(d.train_ids + d.hold_out_ids) == list(range(100))
    assert gen_dataset(1, 100).hold_out_ids == d.hold_out_ids
    assert dataset_digest(gen_dataset(1, 100)) == dataset_digest(d)


@pytest.mark.parametrize("kwargs", [dict(size_px=7), dict(num_classes=1), dict(num_classes=6), dict(imbalance=0.95)])
def test_param_validation(kwargs):
    with pytest.raises(ConfigError):
        SceneParams(**kwargs)


def test_count_validation():
    with pytest.raises(ConfigError):
        gen_dataset(0, 3)


def test_pgm_hand_bytes():
    data = write_mask_pgm(LabelMask(np.array([[0, 1], [2, 0]]), 3))
    assert data == b"P5\n2 2\n255\n" + bytes([0, 1, 2, 0])


def test_pgm_parse_errors():
    good = write_mask_pgm(LabelMask(np.array([[0, 1], [2, 0]]), 3))
    with pytest.raises(ParseError, match="P5"):
        read_mask_pgm(b"P2\n2 2\n255\n0 1 2 0")
    with pytest.raises(ParseError, match="truncated") as info:
        read_mask_pgm(good[:-1])
    assert info.value.offset == len(good) - 1
    with pytest.raises(ParseError) as info:
        read_mask_pgm(good, num_classes=2)
    assert info.value.offset == len(good) - 2
    with pytest.raises(ParseError):
        read_mask_pgm(b"P5\nx 2\n255\n")


def test_pgm_accepts_comments():
    m = read_mask_pgm(b"P5\n# made by hand\n2 1\n255\n\x00\x01", 2)
    np.testing.assert_array_equal(m.labels, [[0, 1]])


def test_features_parse_errors():
    blob = write_features_bin(np.zeros((2, 3, 4)))
    with pytest.raises(ParseError):
        read_features_bin(b"ZZZZ" + blob[4:])
    with pytest.raises(ParseError):
        read_features_bin(blob[:-3])


@given(st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_file_round_trips(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 6))
    s = gen_scene(seed % 1000, size_px=int(rng.integers(8, 20)), num_classes=C, imbalance=0.3, index=1)
    assert read_mask_pgm(write_mask_pgm(s.mask), C) == s.mask
    back = read_features_bin(write_features_bin(s.features))
    assert back.tobytes() == s.features.tobytes()


def test_directory_round_trip(tmp_path):
    d = gen_dataset(2, 12, SceneParams(size_px=10))
    write_dataset(d, tmp_path)
    assert len(list((tmp_path / "train").glob("*.pgm"))) == 9
    assert len(list((tmp_path / "holdout").glob("*.aslf"))) == 3
    man = json.loads((tmp_path / "dataset.json").read_text())
    assert man["seed"] == 2
    back = read_dataset(tmp_path)
    assert dataset_digest(back) == dataset_digest(d)
    assert back.params == d.params


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)
