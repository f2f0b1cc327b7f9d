"""Tests for feature maps, the linear scorer, SGD and task training"""

import numpy as np
import pytest

from maucl.dataset import MultiLabelDataset
from maucl.errors import NonFiniteGradientError, StructuralError
from maucl.loss import BaseLoss, ClassWeights, LossConfig, LossKind, MarginSchedule, build_margins
from maucl.memory import MemoryBuffer, UpdatePolicy
from maucl.metrics import macro_auc
from maucl.model import (
    IdentityMap,
    RandomFourierMap,
    Scorer,
    SgdConfig,
    forward,
    make_feature_map,
    risk_and_grad,
    sgd_step,
    train_task,
    _memory_routes,
)


def separable_task(seed: int, n: int = 400, d: int = 6, classes=(0, 1), num_classes=None) -> MultiLabelDataset:
    """Class k shifts feature k by 4; every class has both sides"""
    rng = np.random.default_rng(seed)
    num_classes = max(classes) + 1 if num_classes is None else num_classes
    labels = np.zeros((n, num_classes), dtype=np.int8)
    for k in classes:
        labels[:, k] = rng.random(n) < 0.3
        labels[:2, k] = [1, 0]
    features = rng.standard_normal((n, d))
    features[:, :num_classes] += 4.0 * labels
    return MultiLabelDataset(features, labels, class_ids=classes)


class TestForward:
    def test_zero_weights_give_zero_scores(self):
        scorer = Scorer(3, IdentityMap(4))
        assert not forward(scorer, np.ones((5, 4))).any()

    def test_basis_row(self):
        scorer = Scorer(1, IdentityMap(2), weights=np.array([[1.0, 0.0]]))
        assert forward(scorer, np.array([[3.0, -1.0]]))[0, 0] == 3.0

    def test_random_fourier_is_deterministic(self):
        X = np.random.default_rng(0).standard_normal((6, 3))
        a = RandomFourierMap(3, dim=16, seed=4).transform(X)
        b = RandomFourierMap(3, dim=16, seed=4).transform(X)
        np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch(self):
        scorer = Scorer(2, IdentityMap(4))
        with pytest.raises(StructuralError):
            scorer.forward(np.ones((2, 3)))

    def test_bias_column(self):
        fmap = make_feature_map({"kind": "identity", "bias": True}, 2)
        assert fmap.output_dim == 3
        np.testing.assert_array_equal(fmap.transform(np.array([[2.0, 5.0]])), [[2.0, 5.0, 1.0]])


class TestRiskAndGrad:
    def test_single_active_positive_gives_minus_x(self):
        scorer = Scorer(1, IdentityMap(2))
        X = np.array([[3.0, -1.0], [0.0, 0.0]])
        labels = np.array([[1], [0]], dtype=np.int8)
        weights = ClassWeights(np.array([1.0]), np.array([1.0]))
        result = risk_and_grad(scorer, X, labels, [0], weights, MarginSchedule.zeros(1), LossConfig(LossKind.RU))
        np.testing.assert_array_equal(result.grad[0], [-3.0, 1.0])

    def test_inactive_hinges_give_zero_gradient(self):
        scorer = Scorer(1, IdentityMap(1), weights=np.array([[5.0]]))
        X = np.array([[1.0], [-1.0]])
        labels = np.array([[1], [0]], dtype=np.int8)
        result = risk_and_grad(scorer, X, labels, [0], ClassWeights.from_labels(labels),
                               MarginSchedule.zeros(1), LossConfig(LossKind.RU))
        assert result.risk == 0.0
        assert not result.grad.any()

    def test_rows_outside_class_set_are_zero(self):
        task = separable_task(0, n=40, classes=(0, 1, 2, 3))
        scorer = Scorer(4, IdentityMap(6), weights=np.random.default_rng(1).standard_normal((4, 6)))
        result = risk_and_grad(scorer, task.features, task.labels, [0, 2],
                               ClassWeights.from_labels(task.labels),
                               build_margins({0: 5, 2: 5}, 1.0, 4), LossConfig(LossKind.RLDAM))
        assert not result.grad[[1, 3]].any()

    def test_matches_finite_differences_in_weights(self):
        rng = np.random.default_rng(2)
        cfg = LossConfig(LossKind.RLDAM, BaseLoss.LOGISTIC, lam=0.7)
        h = 1e-5
        for instance in range(50):
            task = separable_task(instance, n=12, d=3)
            scorer = Scorer(2, IdentityMap(3, bias=True), weights=rng.standard_normal((2, 4)))
            weights = ClassWeights.from_labels(task.labels)
            counts = {k: int(task.labels[:, k].sum()) for k in (0, 1)}
            sched = build_margins(counts, 0.7, 2)
            analytic = risk_and_grad(scorer, task.features, task.labels, [0, 1], weights, sched, cfg).grad
            numeric = np.zeros_like(scorer.W)
            for idx in np.ndindex(*scorer.W.shape):
                values = []
                for sign in (1, -1):
                    shifted = scorer.copy()
                    shifted.W[idx] += sign * h
                    values.append(risk_and_grad(shifted, task.features, task.labels, [0, 1],
                                                weights, sched, cfg).risk)
                numeric[idx] = (values[0] - values[1]) / (2 * h)
            denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
            assert np.linalg.norm(analytic - numeric) / denom < 1e-5


class TestSgdStep:
    def test_zero_gradient_no_decay_is_identity(self):
        W = np.random.default_rng(0).standard_normal((2, 3))
        scorer = Scorer(2, IdentityMap(3), weights=W)
        sgd_step(scorer, np.zeros((2, 3)), None, eta=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(scorer.W, W)

    def test_hand_computed_step(self):
        scorer = Scorer(1, IdentityMap(2))
        sgd_step(scorer, np.array([[-1.0, 0.0]]), None, eta=0.1, weight_decay=0.0)
        np.testing.assert_allclose(scorer.W, [[0.1, 0.0]])

    def test_memory_gradient_is_added(self):
        scorer = Scorer(1, IdentityMap(2))
        sgd_step(scorer, np.array([[-1.0, 0.0]]), np.array([[0.0, -2.0]]), eta=0.5, weight_decay=0.0)
        np.testing.assert_allclose(scorer.W, [[0.5, 1.0]])

    def test_projection_onto_norm_cap(self):
        scorer = Scorer(2, IdentityMap(2), norm_cap=1.0)
        sgd_step(scorer, np.array([[-20.0, 0.0], [0.0, -3.0]]), None, eta=0.1, weight_decay=0.0)
        np.testing.assert_allclose(np.linalg.norm(scorer.W, axis=1), [1.0, 0.3])
        assert scorer.max_row_norm() <= 1.0 + 1e-12

    def test_non_finite_gradient_aborts(self):
        scorer = Scorer(1, IdentityMap(2))
        with pytest.raises(NonFiniteGradientError):
            sgd_step(scorer, np.array([[np.nan, 0.0]]), None)

    def test_momentum_accumulates_velocity(self):
        scorer = Scorer(1, IdentityMap(1))
        velocity = np.zeros((1, 1))
        for _ in range(2):
            sgd_step(scorer, np.array([[-1.0]]), None, eta=1.0, weight_decay=0.0, momentum=0.5, velocity=velocity)
        # 1 + (0.5 + 1)
        np.testing.assert_allclose(scorer.W, [[2.5]])


class TestTrainTask:
    def test_no_epochs_leaves_scorer_unchanged(self):
        task = separable_task(0)
        scorer = Scorer(2, IdentityMap(6))
        _, log = train_task(scorer, task, None, LossConfig(), SgdConfig(epochs=0))
        assert not scorer.W.any()
        assert log.steps == 0

    def test_learns_separable_task(self):
        task = separable_task(1)
        scorer = Scorer(2, IdentityMap(6, bias=True))
        train_task(scorer, task, None, LossConfig(), SgdConfig(epochs=50, seed=3))
        report = macro_auc(scorer.forward(task.features), task.labels, [0, 1])
        assert report.macro > 0.95

    def test_deterministic_given_seed(self):
        task = separable_task(2)
        weights = []
        for _ in range(2):
            scorer = Scorer(2, IdentityMap(6))
            train_task(scorer, task, None, LossConfig(), SgdConfig(epochs=3, seed=5))
            weights.append(scorer.W)
        assert np.array_equal(weights[0], weights[1])

    def test_risk_decreases_on_most_seeds(self):
        decreased = 0
        for seed in range(20):
            scorer = Scorer(2, IdentityMap(6, bias=True))
            _, log = train_task(scorer, separable_task(seed), None, LossConfig(), SgdConfig(epochs=10, seed=seed))
            decreased += log.epoch_risks[-1] < log.epoch_risks[0]
        assert decreased >= 16

    def test_replay_uses_memory_of_earlier_task(self):
        first = separable_task(3, n=120, classes=(0, 1), num_classes=4)
        second = separable_task(4, n=120, classes=(2, 3), num_classes=4)
        memory = MemoryBuffer(40, UpdatePolicy.WRU, wru_subset=None)
        scorer = Scorer(4, IdentityMap(6))
        _, first_log = train_task(scorer, first, memory, LossConfig(), SgdConfig(epochs=2), task_id=1)
        assert not first_log.replay
        memory.update(1, first, seed=0)
        before = scorer.W[[0, 1]].copy()
        _, log = train_task(scorer, second, memory, LossConfig(), SgdConfig(epochs=2), task_id=2)
        assert log.replay
        assert log.steps > 0
        assert not np.array_equal(scorer.W[[0, 1]], before)

    def test_replayed_rows_weighted_by_task_counts(self):
        first = separable_task(3, n=120, classes=(0, 1), num_classes=4)
        memory = MemoryBuffer(40, UpdatePolicy.WRU, wru_subset=None).update(1, first, seed=0)
        routes = _memory_routes(memory, LossConfig(), 4)
        assert routes[1].weight_counts == memory.memory_counts(1)
        stored = _memory_routes(memory, LossConfig(reweighting="stored"), 4)
        assert stored[1].weight_counts == dict(memory.stored_counts(1))

    def test_empty_task_rejected(self):
        empty = MultiLabelDataset(np.empty((0, 2)), np.empty((0, 1)))
        with pytest.raises(StructuralError):
            train_task(Scorer(1, IdentityMap(2)), empty, None, LossConfig(), SgdConfig())
