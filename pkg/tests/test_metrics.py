import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autosegloss.errors import ConfigError, DomainError
from autosegloss.metrics import (
    ALL_METRICS, LabelMask, MetricId, boundary_extract, eval_metric, max_pool, min_pool, one_hot,
)
from oracles import naive_metric

M = lambda a, C=2: LabelMask(np.array(a), C)  # noqa: E731


def test_one_hot():
    m = M([[0, 0], [1, 1]])
    np.testing.assert_array_equal(one_hot(m, 1), [[0, 0], [1, 1]])
    np.testing.assert_array_equal(one_hot(m, 0), [[1, 1], [0, 0]])
    with pytest.raises(DomainError):
        one_hot(m, 5)


def test_label_mask_invariants():
    with pytest.raises(DomainError):
        M([[0, 2]])
    with pytest.raises(DomainError):
        LabelMask(np.zeros((0, 3), dtype=int), 2)


def test_pooling_on_single_spike():
    x = np.zeros((4, 4))
    x[1, 1] = 1
    expected = np.zeros((4, 4))
    expected[0:3, 0:3] = 1
    np.testing.assert_array_equal(max_pool(x, 3), expected)
    np.testing.assert_array_equal(min_pool(x, 3), np.zeros((4, 4)))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_pooling_constant_map(k):
    x = np.full((5, 6), 0.3)
    np.testing.assert_array_equal(min_pool(x, k), x)
    np.testing.assert_array_equal(max_pool(x, k), x)


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        max_pool(np.zeros((3, 3)), 2)
    with pytest.raises(ConfigError):
        min_pool(np.zeros((3, 3)), 0)


@given(st.integers(0, 2**31), st.sampled_from([1, 3, 5]))
@settings(max_examples=50, deadline=None)
def test_pool_sandwich(seed, k):
    x = np.random.default_rng(seed).uniform(size=(6, 7))
    assert np.all(min_pool(x, k) <= x) and np.all(x <= max_pool(x, k))
    np.testing.assert_array_equal(min_pool(min_pool(x, 1), 1), x)
    np.testing.assert_array_equal(max_pool(max_pool(x, 1), 1), x)


def test_boundary_examples():
    assert not boundary_extract(np.ones((4, 4))).any()
    assert not boundary_extract(np.zeros((4, 4))).any()
    sq = np.zeros((4, 4), dtype=int)
    sq[1:3, 1:3] = 1
    np.testing.assert_array_equal(boundary_extract(sq), sq)


def test_boundary_rejects_soft_input():
    with pytest.raises(DomainError):
        boundary_extract(np.full((3, 3), 0.5))


def test_hand_computed_scores():
    gt = [M([[0, 0], [1, 1]])]
    pred = [M([[0, 1], [1, 1]])]
    assert eval_metric("gacc", pred, gt) == pytest.approx(0.75, abs=1e-15)
    assert eval_metric("macc", pred, gt) == pytest.approx(0.75, abs=1e-15)
    assert eval_metric("miou", pred, gt) == pytest.approx(7 / 12, abs=1e-15)
    assert eval_metric("fwiou", pred, gt) == pytest.approx(7 / 12, abs=1e-15)


@pytest.mark.parametrize("name", [m.value for m in ALL_METRICS])
def test_perfect_prediction(name):
    rng = np.random.default_rng(3)
    gts = [M(rng.integers(0, 3, (5, 5)), 3) for _ in range(3)]
    assert eval_metric(name, gts, gts) == 1.0


@pytest.mark.parametrize("tol", [0, 1, 2, 4])
def test_bf1_identical_boundaries(tol):
    gt = M(np.kron(np.array([[0, 1], [2, 0]]), np.ones((3, 3), dtype=int)), 3)
    assert eval_metric(MetricId.of("bf1", tol), [gt], [gt]) == 1.0


def test_errors():
    a = M([[0, 1]])
    with pytest.raises(DomainError):
        eval_metric("miou", [], [])
    with pytest.raises(DomainError):
        eval_metric("miou", [a], [a, a])
    with pytest.raises(DomainError):
        eval_metric("miou", [M([[0, 1, 1]])], [a])


def test_tolerance_only_for_boundary_metrics():
    with pytest.raises(ConfigError):
        MetricId("miou", 2)
    assert MetricId.of("bf1").boundary_tolerance_px == 2
    assert MetricId.of("gacc", 3).boundary_tolerance_px == 0


def test_single_class_mask_has_no_boundary():
    m = M(np.full((5, 5), 1), 3)
    for c in range(3):
        assert not boundary_extract(one_hot(m, c)).any()


masks = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s))


@given(masks, st.sampled_from([m.value for m in ALL_METRICS]))
@settings(max_examples=60, deadline=None)
def test_scores_in_unit_interval_and_permutation_invariant(rng, name):
    C = int(rng.integers(2, 5))
    n = int(rng.integers(1, 4))
    preds = [M(rng.integers(0, C, (6, 5)), C) for _ in range(n)]
    gts = [M(rng.integers(0, C, (6, 5)), C) for _ in range(n)]
    s = eval_metric(name, preds, gts)
    assert 0.0 <= s <= 1.0
    perm = rng.permutation(n)
    assert eval_metric(name, [preds[i] for i in perm], [gts[i] for i in perm]) == pytest.approx(s, abs=1e-12)


@given(masks)
@settings(max_examples=40, deadline=None)
def test_binary_symmetries(rng):
    a = [M(rng.integers(0, 2, (6, 6)))]
    b = [M(rng.integers(0, 2, (6, 6)))]
    assert eval_metric("miou", a, b) == pytest.approx(eval_metric("miou", b, a), abs=1e-15)
    assert eval_metric("gacc", a, b) == eval_metric("gacc", b, a)


@pytest.mark.parametrize("name", [m.value for m in ALL_METRICS])
def test_matches_loop_oracle(name):
    rng = np.random.default_rng(11)
    for _ in range(15):
        C = int(rng.integers(2, 5))
        preds = [rng.integers(0, C, (6, 6)) for _ in range(2)]
        gts = [rng.integers(0, C, (6, 6)) for _ in range(2)]
        tol = int(rng.integers(0, 3))
        mid = MetricId.of(name, tol)
        got = eval_metric(mid, [M(p, C) for p in preds], [M(g, C) for g in gts])
        assert abs(got - naive_metric(name, preds, gts, C, mid.boundary_tolerance_px)) < 1e-12


def test_mixed_image_sizes():
    gts = [M([[0, 1]]), M([[1, 1], [0, 0]])]
    preds = [M([[0, 0]]), M([[1, 1], [0, 0]])]
    assert eval_metric("gacc", preds, gts) == pytest.approx(5 / 6)
