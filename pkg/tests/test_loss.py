"""Tests for the reweighted margin loss family"""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maucl.errors import ConfigError, DegenerateRiskError, StructuralError
from maucl.loss import (
    BaseLoss,
    ClassWeights,
    LossConfig,
    LossKind,
    MarginSchedule,
    adjusted_cl_risk,
    base_loss,
    base_loss_grad,
    bce_risk,
    build_margins,
    class_risk,
    rldam_pair,
    task_risk,
)


def uniform_schedule(delta: float, num_classes: int = 1) -> MarginSchedule:
    return MarginSchedule(1.0, np.full(num_classes, delta), np.full(num_classes, delta))


def random_problem(rng: np.random.Generator, n: int = 8, num_classes: int = 3):
    """Scores and labels where every class has both positives and negatives"""
    labels = (rng.random((n, num_classes)) < 0.4).astype(np.int8)
    labels[0] = 1
    labels[1] = 0
    scores = rng.normal(scale=1.5, size=(n, num_classes))
    return scores, labels


def margins_for(labels: np.ndarray, lam: float) -> MarginSchedule:
    counts = {k: int(c) for k, c in enumerate(labels.sum(axis=0))}
    return build_margins(counts, lam, labels.shape[1])


class TestBaseLoss:
    def test_hinge_values(self):
        assert base_loss(1.0) == 0.0
        assert base_loss(-0.1) == pytest.approx(1.1)

    def test_hinge_subgradient_is_zero_at_kink(self):
        assert base_loss_grad(1.0) == 0.0
        assert base_loss_grad(0.999) == -1.0

    def test_logistic_at_zero(self):
        assert base_loss(0.0, BaseLoss.LOGISTIC) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_logistic_is_stable_for_large_arguments(self):
        assert base_loss(-1000.0, BaseLoss.LOGISTIC) == pytest.approx(1000.0)
        assert base_loss(1000.0, BaseLoss.LOGISTIC) == 0.0
        assert base_loss_grad(-1000.0, BaseLoss.LOGISTIC) == pytest.approx(-1.0)


class TestRldamPair:
    def test_hand_computed_value(self):
        assert rldam_pair(0.7, -0.4, 0, uniform_schedule(0.5)) == pytest.approx(1.9)

    def test_both_hinges_inactive(self):
        assert rldam_pair(2.0, -2.0, 0, uniform_schedule(0.5)) == 0.0

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_zero_margins_equal_ru_pair(self, f_pos, f_neg):
        ru = base_loss(f_pos) + base_loss(-f_neg)
        assert rldam_pair(f_pos, f_neg, 0, uniform_schedule(0.0)) == ru

    def test_normalized_variant_divides_by_margin(self):
        value = rldam_pair(0.25, -0.25, 0, uniform_schedule(0.5), normalized=True)
        assert value == pytest.approx(base_loss(0.5) + base_loss(0.5))

    def test_normalized_variant_needs_positive_margins(self):
        with pytest.raises(ConfigError):
            rldam_pair(0.2, 0.1, 0, uniform_schedule(0.0), normalized=True)

    @given(st.floats(-3, 3), st.floats(0.01, 2), st.floats(-3, 3),
           st.sampled_from([BaseLoss.HINGE, BaseLoss.LOGISTIC]))
    def test_monotone_in_scores(self, f, step, f_other, base):
        sched = uniform_schedule(0.3)
        assert rldam_pair(f + step, f_other, 0, sched, base) <= rldam_pair(f, f_other, 0, sched, base)
        assert rldam_pair(f_other, f + step, 0, sched, base) >= rldam_pair(f_other, f, 0, sched, base)


class TestClassRisk:
    def test_hand_computed_value(self):
        labels = np.array([[1], [0], [0]])
        scores = np.array([0.5, -0.5, 1.0])
        risk = class_risk(scores, labels[:, 0], 0, ClassWeights.from_labels(labels), uniform_schedule(0.0))
        assert risk.value == pytest.approx(1.75)
        assert not risk.degenerate

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            scores, labels = random_problem(rng, n=12, num_classes=1)
            scores[:, 0] *= 1e3
            weights = ClassWeights.from_labels(labels)
            sched = uniform_schedule(0.5)
            expected = 0.0
            for s, y in zip(scores[:, 0], labels[:, 0]):
                if y == 1:
                    expected += max(0.0, 1.0 - (s - 0.5)) / weights.count_pos[0]
                else:
                    expected += max(0.0, 1.0 - (-s - 0.5)) / weights.count_neg[0]
            value = class_risk(scores[:, 0], labels[:, 0], 0, weights, sched).value
            assert value == pytest.approx(expected, rel=1e-12)

    def test_missing_positive_side_is_flagged(self):
        labels = np.array([[0], [0]])
        weights = ClassWeights(np.array([1.0]), np.array([2.0]))
        risk = class_risk(np.array([-2.0, 0.0]), labels[:, 0], 0, weights, uniform_schedule(0.0))
        assert risk.degenerate
        assert risk.missing == "positive"
        assert risk.value == pytest.approx(0.5)


class TestTaskRisk:
    def test_single_class_equals_class_risk(self):
        scores, labels = random_problem(np.random.default_rng(1), num_classes=1)
        weights = ClassWeights.from_labels(labels)
        sched = margins_for(labels, 1.0)
        cfg = LossConfig(LossKind.RLDAM)
        expected = class_risk(scores[:, 0], labels[:, 0], 0, weights, sched).value
        assert task_risk(scores, labels, [0], weights, sched, cfg).value == pytest.approx(expected)

    def test_mean_over_classes(self):
        scores, labels = random_problem(np.random.default_rng(2))
        weights = ClassWeights.from_labels(labels)
        sched = margins_for(labels, 1.0)
        per_class = [class_risk(scores[:, k], labels[:, k], k, weights, sched).value for k in (0, 2)]
        result = task_risk(scores, labels, [0, 2], weights, sched, LossConfig(LossKind.RLDAM))
        assert result.value == pytest.approx(np.mean(per_class))
        assert result.used == [0, 2]
        assert not result.grad[:, 1].any()

    def test_degenerate_class_dropped_and_reported(self):
        scores, labels = random_problem(np.random.default_rng(3))
        labels[:, 1] = 0
        weights = ClassWeights.from_labels(labels)
        result = task_risk(scores, labels, [0, 1], weights, uniform_schedule(0.0, 3), LossConfig(LossKind.RU))
        expected = class_risk(scores[:, 0], labels[:, 0], 0, weights, uniform_schedule(0.0, 3)).value
        assert result.dropped == [1]
        assert result.value == pytest.approx(expected)

    def test_all_degenerate_raises(self):
        labels = np.ones((4, 2), dtype=np.int8)
        with pytest.raises(DegenerateRiskError):
            task_risk(np.zeros((4, 2)), labels, [0, 1], ClassWeights.from_labels(labels),
                      uniform_schedule(0.0, 2), LossConfig(LossKind.RU))

    def test_empty_class_set_rejected(self):
        labels = np.ones((4, 2), dtype=np.int8)
        with pytest.raises(StructuralError):
            task_risk(np.zeros((4, 2)), labels, [], None, uniform_schedule(0.0, 2), LossConfig(LossKind.BCE))

    def test_lambda_zero_reduces_to_ru_bit_for_bit(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            scores, labels = random_problem(rng)
            weights = ClassWeights.from_labels(labels)
            rldam = task_risk(scores, labels, [0, 1, 2], weights, margins_for(labels, 0.0),
                              LossConfig(LossKind.RLDAM, lam=0.0))
            ru = task_risk(scores, labels, [0, 1, 2], weights, MarginSchedule.zeros(3), LossConfig(LossKind.RU))
            assert rldam.value == ru.value
            assert np.array_equal(rldam.grad, ru.grad)

    def test_unweighted_margin_loss_with_logistic_base_equals_bce(self):
        scores, labels = random_problem(np.random.default_rng(5))
        cfg = LossConfig(LossKind.LDAM, BaseLoss.LOGISTIC, lam=0.0)
        value = task_risk(scores, labels, [0, 1, 2], None, margins_for(labels, 0.0), cfg).value
        assert value == pytest.approx(bce_risk(scores, labels, [0, 1, 2]), rel=1e-12)


def finite_difference(fn, scores: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(scores)
    for idx in np.ndindex(*scores.shape):
        up, down = scores.copy(), scores.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


def near_hinge_kink(scores: np.ndarray, labels: np.ndarray, sched: MarginSchedule) -> bool:
    z = np.where(labels == 1, scores - sched.delta_pos, -scores - sched.delta_neg)
    return bool(np.any(np.abs(1.0 - z) < 1e-3))


@pytest.mark.parametrize("kind", [LossKind.RLDAM, LossKind.RU, LossKind.BCE])
@pytest.mark.parametrize("base", [BaseLoss.HINGE, BaseLoss.LOGISTIC])
def test_gradient_matches_finite_differences(kind, base):
    rng = np.random.default_rng(sum(map(ord, kind.value + base.value)))
    cfg = LossConfig(kind, base, lam=0.8)
    checked = 0
    while checked < 100:
        scores, labels = random_problem(rng)
        weights = ClassWeights.from_labels(labels)
        sched = margins_for(labels, 0.8) if kind is LossKind.RLDAM else MarginSchedule.zeros(3)
        if kind is not LossKind.BCE and base is BaseLoss.HINGE and near_hinge_kink(scores, labels, sched):
            continue
        classes = [0, 2]
        analytic = task_risk(scores, labels, classes, weights, sched, cfg).grad
        numeric = finite_difference(lambda s: task_risk(s, labels, classes, weights, sched, cfg).value, scores)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-5
        checked += 1


class TestAdjustedRisk:
    def test_first_task_unchanged(self):
        assert adjusted_cl_risk(1.7, []) == 1.7

    def test_mean_of_all_tasks(self):
        assert adjusted_cl_risk(2.0, [1.0, 3.0]) == 2.0

    def test_zero_memory_risks(self):
        assert adjusted_cl_risk(3.0, [0.0, 0.0]) == pytest.approx(1.0)


class TestBce:
    def test_zero_score_positive_label(self):
        assert bce_risk(np.zeros((1, 1)), np.ones((1, 1)), [0]) == pytest.approx(math.log(2.0))

    def test_large_score_is_stable(self):
        assert bce_risk(np.full((1, 1), 30.0), np.ones((1, 1)), [0]) < 1e-12

    def test_symmetric_flip(self):
        scores, labels = random_problem(np.random.default_rng(6))
        assert bce_risk(scores, labels, [0, 1, 2]) == pytest.approx(bce_risk(-scores, 1 - labels, [0, 1, 2]))


class TestMargins:
    def test_sixteen_positives(self):
        assert build_margins({0: 16}, 1.0).delta_pos[0] == pytest.approx(0.5)

    def test_lambda_zero(self):
        sched = build_margins({0: 5, 1: 9}, 0.0)
        assert not sched.delta_pos.any() and not sched.delta_neg.any()

    def test_unit_count(self):
        sched = build_margins({0: 1}, 2.0)
        assert sched.delta_pos[0] == 2.0 and sched.delta_neg[0] == 2.0

    def test_zero_count_rejected(self):
        with pytest.raises(StructuralError):
            build_margins({0: 0}, 1.0)

    def test_strictly_decreasing_in_count(self):
        sched = build_margins({k: c for k, c in enumerate([1, 2, 5, 40, 300])}, 0.7)
        assert np.all(np.diff(sched.delta_pos) < 0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            LossConfig(LossKind.RLDAM, lam=-0.1)


class TestClassWeights:
    def test_stored_counts_scale_to_view(self):
        weights = ClassWeights.from_stored({0: (10, 30)}, n_view=8, num_classes=2)
        assert weights.count_pos[0] == pytest.approx(2.0)
        assert weights.count_neg[0] == pytest.approx(6.0)
        assert weights.w_pos(0) == pytest.approx(0.5)

    def test_population_counts_scale_to_view(self):
        weights = ClassWeights.from_counts({0: (3, 9), 1: (0, 0)}, n_view=4, num_classes=2)
        assert weights.count_pos[0] == pytest.approx(1.0)
        assert weights.count_neg[0] == pytest.approx(3.0)
        assert weights.count_pos[1] == weights.count_neg[1] == 0.0
        assert not weights.from_view

    def test_population_weights_keep_class_missing_a_side_in_view(self):
        scores = np.array([[0.5], [-0.5]])
        labels = np.zeros((2, 1), dtype=np.int8)
        weights = ClassWeights.from_counts({0: (10, 30)}, n_view=2, num_classes=1)
        result = task_risk(scores, labels, [0], weights, uniform_schedule(0.0), LossConfig(LossKind.RU))
        # hinge(-0.5) + hinge(0.5) over the expected 1.5 negatives
        assert result.used == [0]
        assert result.value == pytest.approx(2.0 / 1.5)
        with pytest.raises(DegenerateRiskError):
            task_risk(scores, labels, [0], ClassWeights.from_labels(labels), uniform_schedule(0.0),
                      LossConfig(LossKind.RU))

    def test_population_without_positives_drops_class(self):
        labels = np.zeros((2, 1), dtype=np.int8)
        weights = ClassWeights.from_counts({0: (0, 12)}, n_view=2, num_classes=1)
        with pytest.raises(DegenerateRiskError):
            task_risk(np.zeros((2, 1)), labels, [0], weights, uniform_schedule(0.0), LossConfig(LossKind.RU))
