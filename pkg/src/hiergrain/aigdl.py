"""Learnable intra-level difference matrices, cost-based decisions and smoothed targets."""

from __future__ import annotations

import numpy as np

from .diffcore import (
    Parameter,
    Tensor,
    as_tensor,
    linear_combination,
    mask_diagonal,
    matvec_rows,
    one_hot,
    row_l2_normalize,
    scale,
    soft_cross_entropy,
    softmax,
    take_rows,
)


class NotSquare(ValueError):
    pass


class InvalidDistribution(ValueError):
    pass


class InvalidHyperparameter(ValueError):
    pass


def effective_delta(raw) -> Tensor:
    """Zero the diagonal, then L2-normalize each row (zero rows stay zero)."""
    raw = as_tensor(raw)
    if raw.data.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {raw.shape}")
    return row_l2_normalize(mask_diagonal(raw))


def effective_cost(delta_hat: Tensor, dist: np.ndarray, beta: float) -> Tensor:
    """beta * delta_hat - dist; a score matrix, larger is better."""
    return linear_combination([delta_hat, Tensor(dist)], [beta, -1.0])


class DeltaBank:
    """One raw learnable matrix per level plus the shared beta/epsilon/gamma."""

    def __init__(self, level_sizes, beta: float = 0.5, epsilon: float = 0.3, gamma: float = 0.7):
        if not 0.0 <= epsilon <= 1.0:
            raise InvalidHyperparameter(f"epsilon must lie in [0, 1], got {epsilon}")
        if gamma <= 0:
            raise InvalidHyperparameter(f"gamma must be positive, got {gamma}")
        self.level_sizes = tuple(int(c) for c in level_sizes)
        self.beta = float(beta)
        self.epsilon = float(epsilon)
        self.gamma = float(gamma)
        # uniform off-diagonal start; an all-zero start would have zero gradient
        # through the row normalization and never move
        self.raw = [Parameter(np.ones((c, c)) - np.eye(c)) for c in self.level_sizes]

    def named_parameters(self) -> dict[str, Parameter]:
        return {f"delta.{h}": p for h, p in enumerate(self.raw, start=1)}

    def delta_hat(self, level: int) -> Tensor:
        return effective_delta(self.raw[level - 1])

    def cost(self, level: int, dist: np.ndarray) -> Tensor:
        return effective_cost(self.delta_hat(level), dist, self.beta)

    def cost_array(self, level: int, dist: np.ndarray) -> np.ndarray:
        return self.cost(level, dist).data


def _check_distribution(p: np.ndarray) -> None:
    if p.ndim not in (1, 2) or np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidDistribution("probabilities must be non-negative and sum to 1")


def crm_decide(p, dist) -> np.ndarray | int:
    """Bayes decision under cost ``dist``: argmin_k sum_j dist[k, j] * p[j].

    Accepts a single distribution or a (B, C) batch. Ties go to the
    smallest class index.
    """
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p)
    risk = p @ np.asarray(dist, dtype=np.float64).T
    out = np.argmin(risk, axis=-1)
    return int(out) if p.ndim == 1 else out


def augmented_decide(p, score) -> np.ndarray | int:
    """argmax_k sum_j score[k, j] * p[j] with ``score`` the effective cost matrix."""
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p)
    val = p @ np.asarray(score, dtype=np.float64).T
    out = np.argmax(val, axis=-1)
    return int(out) if p.ndim == 1 else out


def smooth_targets(labels, delta_hat: Tensor | None, dist: np.ndarray,
                   beta: float, epsilon: float, gamma: float) -> Tensor:
    """Rows (1 - eps) * onehot(y) + eps * softmax(gamma * (beta * delta_hat[y] - dist[y])).

    Gradient reaches ``delta_hat`` through the soft term. Pass ``None`` for
    ``delta_hat`` to smooth on the tree distances alone.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidHyperparameter(f"epsilon must lie in [0, 1], got {epsilon}")
    if gamma <= 0:
        raise InvalidHyperparameter(f"gamma must be positive, got {gamma}")
    labels = np.asarray(labels, dtype=np.int64)
    c = dist.shape[0]
    hard = Tensor(one_hot(labels, c))
    if epsilon == 0.0:
        return hard
    neg_dist = Tensor(-np.asarray(dist, dtype=np.float64)[labels])
    if delta_hat is None or beta == 0.0:
        logits = scale(neg_dist, gamma)
    else:
        logits = linear_combination([take_rows(delta_hat, labels), neg_dist], [gamma * beta, gamma])
    soft = softmax(logits)
    if epsilon == 1.0:
        return soft
    return linear_combination([hard, soft], [1.0 - epsilon, epsilon])


def smooth_labels(y: int, level: int, bank: DeltaBank, dist: np.ndarray) -> np.ndarray:
    """Smoothed target vector for a single class index at ``level``."""
    t = smooth_targets([y], bank.delta_hat(level), dist, bank.beta, bank.epsilon, bank.gamma)
    return t.data[0].copy()


def aigdl_loss(targets, score: Tensor, probs: Tensor) -> Tensor:
    """Cross-entropy of ``targets`` against softmax(score @ p) for each row p of ``probs``."""
    return soft_cross_entropy(targets, matvec_rows(score, probs))
