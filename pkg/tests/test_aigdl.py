import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiergrain.aigdl import (
    DeltaBank,
    InvalidDistribution,
    InvalidHyperparameter,
    NotSquare,
    aigdl_loss,
    augmented_decide,
    crm_decide,
    effective_cost,
    effective_delta,
    smooth_labels,
    smooth_targets,
)
from hiergrain.diffcore import (
    Parameter,
    Tensor,
    grad_check,
    soft_cross_entropy,
    softmax,
    softmax_np,
    weighted_sum,
)
from hiergrain.hierarchy import balanced_tree


def brute_force_min(p, cost):
    """Scan every class, keep the first strictly better risk."""
    best, best_risk = 0, None
    for k in range(len(p)):
        risk = sum(cost[k][j] * p[j] for j in range(len(p)))
        if best_risk is None or risk < best_risk:
            best, best_risk = k, risk
    return best


def random_distribution(rng, c):
    p = rng.dirichlet(np.ones(c))
    return p / p.sum()


class TestEffectiveDelta:
    def test_mask_then_normalize(self):
        assert effective_delta(Tensor([[5.0, 3.0], [4.0, 7.0]])).data.tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_zero_matrix(self):
        assert np.array_equal(effective_delta(Tensor(np.zeros((3, 3)))).data, np.zeros((3, 3)))

    def test_345_row(self):
        out = effective_delta(Tensor([[9.0, 3.0, 4.0], [1.0, 0.0, 0.0], [0.0, 0.0, 2.0]])).data
        assert out[0].tolist() == [0.0, 0.6, 0.8]
        assert out[2].tolist() == [0.0, 0.0, 0.0]

    def test_not_square(self):
        with pytest.raises(NotSquare):
            effective_delta(Tensor(np.ones((2, 3))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_constraints(self, c, seed):
        raw = np.random.default_rng(seed).normal(size=(c, c))
        out = effective_delta(Tensor(raw)).data
        assert np.all(np.diag(out) == 0.0)
        norms = np.linalg.norm(out, axis=1)
        nz = norms > 0
        assert np.all(np.abs(norms[nz] - 1.0) <= 1e-12)

    def test_gradient_reaches_off_diagonal_only(self):
        rng = np.random.default_rng(0)
        raw = Parameter(rng.normal(size=(4, 4)))
        w = rng.normal(size=(4, 4))
        weighted_sum(effective_delta(raw), w).backward()
        assert np.all(np.diag(raw.grad) == 0.0)
        assert np.any(raw.grad != 0.0)


class TestDeltaBank:
    def test_initial_effective_matrix_is_uniform_off_diagonal(self):
        bank = DeltaBank([2, 5])
        dh = bank.delta_hat(2).data
        assert np.all(np.diag(dh) == 0.0)
        off = dh[~np.eye(5, dtype=bool)]
        assert np.allclose(off, 1.0 / 2.0)

    def test_initial_matrix_has_gradient(self):
        bank = DeltaBank([3])
        weighted_sum(bank.delta_hat(1), np.arange(9.0).reshape(3, 3)).backward()
        assert np.any(bank.raw[0].grad != 0.0)

    @pytest.mark.parametrize("kw", [dict(epsilon=-0.1), dict(epsilon=1.5), dict(gamma=0.0)])
    def test_bad_hyperparameters(self, kw):
        with pytest.raises(InvalidHyperparameter):
            DeltaBank([2], **kw)

    def test_cost_diagonal_zero(self):
        tree = balanced_tree([2, 3])
        bank = DeltaBank(tree.level_sizes, beta=0.7)
        bank.raw[1].data[...] = np.random.default_rng(0).normal(size=(6, 6))
        cost = bank.cost_array(2, tree.distance_matrix(2))
        assert np.all(np.diag(cost) == 0.0)


class TestCrm:
    def test_zero_one_cost_is_argmax(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = random_distribution(rng, 6)
            assert crm_decide(p, np.ones((6, 6)) - np.eye(6)) == int(np.argmax(p))

    def test_hand_example(self):
        d = np.array([[0, 2, 2], [2, 0, 1], [2, 1, 0]], dtype=float)
        p = np.array([0.4, 0.35, 0.25])
        risks = d @ p
        assert risks == pytest.approx([1.2, 1.05, 1.15])
        assert crm_decide(p, d) == 1

    def test_one_hot(self):
        d = balanced_tree([2, 2]).distance_matrix(2)
        for j in range(4):
            assert crm_decide(np.eye(4)[j], d) == j

    def test_batch(self):
        d = np.array([[0, 2, 2], [2, 0, 1], [2, 1, 0]], dtype=float)
        p = np.array([[0.4, 0.35, 0.25], [1.0, 0.0, 0.0]])
        assert crm_decide(p, d).tolist() == [1, 0]

    @pytest.mark.parametrize("p", [[0.5, 0.6], [1.2, -0.2]])
    def test_invalid(self, p):
        with pytest.raises(InvalidDistribution):
            crm_decide(np.array(p), np.zeros((2, 2)))


class TestAugmented:
    def test_beta_zero_matches_crm(self):
        rng = np.random.default_rng(1)
        tree = balanced_tree([3, 2, 2])
        d = tree.distance_matrix(3).astype(float)
        raw = Tensor(rng.normal(size=(12, 12)))
        score = effective_cost(effective_delta(raw), d, 0.0).data
        for _ in range(100):
            p = random_distribution(rng, 12)
            assert augmented_decide(p, score) == crm_decide(p, d)

    def test_large_beta_follows_delta(self):
        # 4 classes, two sibling pairs; delta row for class 1 rewards class 3 strongly
        d = balanced_tree([2, 2]).distance_matrix(2).astype(float)
        raw = np.zeros((4, 4))
        raw[0] = [0, 1, 0, 0]
        raw[1] = [0, 0, 0, 1]
        raw[2] = [0, 0, 0, 1]
        raw[3] = [0, 0, 1, 0]
        p = np.array([0.1, 0.2, 0.3, 0.4])
        for beta in (0.0, 5.0):
            score = effective_cost(effective_delta(Tensor(raw)), d, beta).data
            brute = max(range(4), key=lambda k: (sum(score[k, j] * p[j] for j in range(4)), -k))
            assert augmented_decide(p, score) == brute
        # beta = 0: plain CRM picks 3; beta = 5: row 2 rewards mass on class 3 and wins
        assert augmented_decide(p, effective_cost(effective_delta(Tensor(raw)), d, 0.0).data) == 3
        assert augmented_decide(p, effective_cost(effective_delta(Tensor(raw)), d, 5.0).data) == 2

    def test_tie_goes_to_class_zero(self):
        score = np.tile(np.array([[0.0, -1.0, -2.0]]), (3, 1))
        assert augmented_decide(np.full(3, 1 / 3), score) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 10), st.floats(-5, 5), st.integers(0, 2**31 - 1))
    def test_uniform_shift_invariance(self, c, shift, seed):
        rng = np.random.default_rng(seed)
        score = np.round(rng.normal(size=(c, c)), 3)
        p = random_distribution(rng, c)
        vals = p @ score.T
        gap = np.sort(vals)[-1] - np.sort(vals)[-2]
        if gap < 1e-9:
            return
        assert augmented_decide(p, score + shift) == augmented_decide(p, score)


class TestSmoothing:
    def setup_method(self):
        self.tree = balanced_tree([2, 3])
        self.dist = self.tree.distance_matrix(2).astype(float)

    def test_epsilon_zero_is_one_hot(self):
        bank = DeltaBank(self.tree.level_sizes, epsilon=0.0)
        for y in range(6):
            assert smooth_labels(y, 2, bank, self.dist).tolist() == np.eye(6)[y].tolist()

    def test_soft_label_special_case(self):
        bank = DeltaBank(self.tree.level_sizes, beta=0.0, epsilon=1.0, gamma=1.3)
        for y in range(6):
            expected = softmax_np(-1.3 * self.dist[y])
            assert np.max(np.abs(smooth_labels(y, 2, bank, self.dist) - expected)) <= 1e-12

    def test_two_class_value(self):
        bank = DeltaBank([2], beta=0.0, epsilon=1.0, gamma=1.0)
        out = smooth_labels(0, 1, bank, np.array([[0.0, 1.0], [1.0, 0.0]]))
        e = math.exp(-1)
        assert out == pytest.approx([1 / (1 + e), e / (1 + e)], abs=1e-15)
        assert out == pytest.approx([0.73106, 0.26894], abs=1e-5)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 1), st.floats(0.05, 5), st.floats(0, 3), st.integers(0, 2**31 - 1))
    def test_rows_are_distributions(self, eps, gamma, beta, seed):
        rng = np.random.default_rng(seed)
        dh = effective_delta(Tensor(rng.normal(size=(6, 6))))
        t = smooth_targets(np.arange(6), dh, self.dist, beta, eps, gamma).data
        assert np.all(t >= 0)
        assert np.all(np.abs(t.sum(axis=1) - 1.0) <= 1e-9)

    def test_gradient_reaches_delta(self):
        rng = np.random.default_rng(2)
        raw = Parameter(rng.normal(size=(6, 6)))
        z = Parameter(rng.normal(size=(4, 6)))
        y = np.array([0, 3, 5, 3])

        def fn():
            t = smooth_targets(y, effective_delta(raw), self.dist, 0.8, 0.4, 0.9)
            return soft_cross_entropy(t, z)

        report = grad_check(fn, {"raw": raw, "z": z}, tol=1e-4)
        assert report.passed, report.worst()

    @pytest.mark.parametrize("eps,gamma", [(-0.1, 1.0), (1.1, 1.0), (0.5, 0.0)])
    def test_invalid(self, eps, gamma):
        with pytest.raises(InvalidHyperparameter):
            smooth_targets([0], None, self.dist, 0.0, eps, gamma)


class TestAigdlLoss:
    def test_zero_score_gives_log_c(self):
        rng = np.random.default_rng(0)
        p = softmax(Tensor(rng.normal(size=(3, 5))))
        t = Tensor(rng.dirichlet(np.ones(5), size=3))
        loss = aigdl_loss(t, Tensor(np.zeros((5, 5))), p)
        assert float(loss.data) == pytest.approx(math.log(5), abs=1e-12)

    def test_symmetric_two_class(self):
        d = np.array([[0.0, 1.0], [1.0, 0.0]])
        score = effective_cost(Tensor(np.zeros((2, 2))), d, 0.0)
        loss = aigdl_loss(Tensor([[1.0, 0.0]]), score, Tensor([[0.5, 0.5]]))
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        tree = balanced_tree([2, 2])
        d = tree.distance_matrix(2).astype(float)
        raw = Parameter(rng.normal(size=(4, 4)))
        z = Parameter(rng.normal(size=(5, 4)))
        y = rng.integers(0, 4, size=5)

        def fn():
            dh = effective_delta(raw)
            t = smooth_targets(y, dh, d, 0.5, 0.3, 0.7)
            return aigdl_loss(t, effective_cost(dh, d, 0.5), softmax(z))

        report = grad_check(fn, [raw, z], tol=1e-4)
        assert report.passed, report.worst()
