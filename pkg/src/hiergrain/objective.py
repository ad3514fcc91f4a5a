"""Level weights and the combined per-level training objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .aigdl import DeltaBank, aigdl_loss, effective_cost, smooth_targets
from .diffcore import Tensor, linear_combination, one_hot, soft_cross_entropy, softmax


class LabelInconsistency(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """Loss knobs.

    ``include_bilt`` keeps the hard-label cross-entropy term at every level,
    ``include_aigdl`` adds the learned-cost term and ``include_smoothing``
    switches that term's targets from one-hot to smoothed labels. With
    AIGDL off and smoothing on, the cross-entropy term itself trains on
    tree-distance soft labels.
    """

    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 0.3
    gamma: float = 0.7
    include_bilt: bool = True
    include_aigdl: bool = True
    include_smoothing: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not (self.include_bilt or self.include_aigdl):
            raise ValueError("at least one of include_bilt / include_aigdl must be on")

    def to_dict(self) -> dict:
        return asdict(self)

    def make_bank(self, level_sizes) -> DeltaBank:
        return DeltaBank(level_sizes, beta=self.beta, epsilon=self.epsilon, gamma=self.gamma)


def level_weight(alpha: float, h: int, depth: int) -> float:
    if not 1 <= h <= depth:
        raise ValueError(f"level {h} outside 1..{depth}")
    return math.exp(alpha * (h - depth))


def level_weights(alpha: float, depth: int) -> list[float]:
    return [level_weight(alpha, h, depth) for h in range(1, depth + 1)]


def check_label_consistency(tree, labels: np.ndarray) -> None:
    """Raise unless every coarse column is the ancestor of the finest column."""
    labels = np.asarray(labels)
    anc = tree.ancestor_table(tree.depth)
    bad = np.nonzero(np.any(anc[:, labels[:, -1]].T != labels, axis=1))[0]
    if bad.size:
        raise LabelInconsistency(f"row {int(bad[0])}: coarse labels disagree with the tree")


def level_losses(
    logits: list[Tensor],
    labels: np.ndarray,
    config: LossConfig,
    bank: DeltaBank | None,
    distances: list[np.ndarray],
) -> list[Tensor]:
    """Unweighted loss tensor for each level, coarse to fine."""
    depth = len(logits)
    labels = np.asarray(labels, dtype=np.int64)
    out = []
    for h in range(1, depth + 1):
        z = logits[h - 1]
        y = labels[:, h - 1]
        dist = np.asarray(distances[h - 1], dtype=np.float64)
        c = z.shape[1]
        terms = []
        if config.include_aigdl:
            if bank is None:
                raise ValueError("AIGDL term needs a DeltaBank")
            delta_hat = bank.delta_hat(h)
            eps = config.epsilon if config.include_smoothing else 0.0
            targets = smooth_targets(y, delta_hat, dist, config.beta, eps, config.gamma)
            score = effective_cost(delta_hat, dist, config.beta)
            if config.include_bilt:
                terms.append(soft_cross_entropy(one_hot(y, c), z, validate=False))
            terms.append(aigdl_loss(targets, score, softmax(z)))
        else:
            if config.include_smoothing:
                targets = smooth_targets(y, None, dist, 0.0, config.epsilon, config.gamma)
            else:
                targets = Tensor(one_hot(y, c))
            terms.append(soft_cross_entropy(targets, z, validate=False))
        out.append(terms[0] if len(terms) == 1 else linear_combination(terms, [1.0] * len(terms)))
    return out


def total_loss(
    logits: list[Tensor],
    labels: np.ndarray,
    config: LossConfig,
    bank: DeltaBank | None,
    distances: list[np.ndarray],
    tree=None,
) -> Tensor:
    """sum_h lambda_h * (CE_h + AIGDL_h) with lambda_h = exp(alpha * (h - H)).

    Pass ``tree`` to validate label ancestry first; training validates once
    at dataset load instead.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape[1] != len(logits):
        raise ValueError(f"labels must be (B, {len(logits)}), got {labels.shape}")
    if tree is not None:
        check_label_consistency(tree, labels)
    per_level = level_losses(logits, labels, config, bank, distances)
    return linear_combination(per_level, level_weights(config.alpha, len(logits)))
