"""Synthetic hierarchical Gaussian datasets and their CSV file format.

Centers are drawn top-down: level-1 centers around the origin, each child
center offset from its parent, samples scattered around their leaf
center. Making the per-level spread shrink with depth gives easy coarse
levels and a hard finest level.

File format (UTF-8)::

    #hiergrain v1, d=<d>, H=<H>, tree=<fingerprint>
    <split>,<x_1>,...,<x_d>,<y^1>,...,<y^H>
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hierarchy import LabelTree, balanced_tree

SPLITS = ("train", "val", "test")
_HEADER = re.compile(r"^#hiergrain v1, d=(\d+), H=(\d+), tree=([0-9a-f]+)$")


class InvalidSpec(ValueError):
    pass


class FormatViolation(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    tree: LabelTree
    dim: int = 32
    per_leaf: int = 60
    spreads: tuple[float, ...] = (3.0, 2.0, 1.5)
    noise: float = 3.0
    seed: int = 0
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> None:
        if self.dim < 1:
            raise InvalidSpec(f"feature dim must be >= 1, got {self.dim}")
        if self.per_leaf < 3:
            raise InvalidSpec(f"need at least 3 samples per leaf, got {self.per_leaf}")
        if len(self.spreads) != self.tree.depth:
            raise InvalidSpec(f"{len(self.spreads)} spreads for a depth-{self.tree.depth} tree")
        if any(s <= 0 for s in self.spreads) or self.noise < 0:
            raise InvalidSpec("spreads must be positive and noise non-negative")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) \
                or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise InvalidSpec(f"split fractions must be 3 non-negative values summing to 1: {self.fractions}")


def default_tree() -> LabelTree:
    """4 coarse classes, 3 children each, 3 leaves each: 4/12/36."""
    return balanced_tree([4, 3, 3], prefix="c")


def default_spec(seed: int = 0, **overrides) -> DatasetSpec:
    return DatasetSpec(tree=default_tree(), seed=seed, **overrides)


@dataclass
class Dataset:
    tree: LabelTree
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    centers: list[np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype="<U5")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.tree.fingerprint == other.tree.fingerprint
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.splits, other.splits))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == split
        return self.features[mask], self.labels[mask]

    def fingerprint(self) -> str:
        return hashlib.sha256(to_text(self).encode("utf-8")).hexdigest()[:16]


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    tree = spec.tree
    rng = np.random.default_rng(spec.seed)
    centers: list[np.ndarray] = []
    prev = np.zeros((1, spec.dim))
    for h in range(1, tree.depth + 1):
        parent = np.asarray(tree.parents[h - 1], dtype=np.int64)
        offsets = rng.normal(0.0, spec.spreads[h - 1], size=(tree.level_sizes[h - 1], spec.dim))
        prev = prev[parent] + offsets
        centers.append(prev)

    anc = tree.ancestor_table(tree.depth)
    n = spec.per_leaf
    n_train, n_val, n_test = _split_counts(n, spec.fractions)
    tags = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)
    feats, labels, splits = [], [], []
    for leaf in range(tree.num_leaves):
        x = centers[-1][leaf] + rng.normal(0.0, spec.noise, size=(n, spec.dim))
        feats.append(x)
        labels.append(np.repeat(anc[:, leaf][None, :], n, axis=0))
        splits.append(tags[rng.permutation(n)])
    return Dataset(tree, np.concatenate(feats), np.concatenate(labels),
                   np.concatenate(splits), centers=centers)


def nearest_center_predict(centers: np.ndarray, x: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def to_text(ds: Dataset) -> str:
    tree = ds.tree
    lines = [f"#hiergrain v1, d={ds.dim}, H={tree.depth}, tree={tree.fingerprint}\n"]
    for split, x, y in zip(ds.splits, ds.features, ds.labels):
        # 17 significant digits round-trip float64 exactly
        fx = ",".join(format(v, ".17g") for v in x)
        fy = ",".join(str(int(v)) for v in y)
        lines.append(f"{split},{fx},{fy}\n")
    return "".join(lines)


def save(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(to_text(ds), encoding="utf-8")


def parse(text: str, tree: LabelTree) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise FormatViolation("empty dataset file")
    m = _HEADER.match(lines[0].strip())
    if not m:
        raise FormatViolation(f"bad header: {lines[0][:80]!r}")
    dim, depth, fp = int(m.group(1)), int(m.group(2)), m.group(3)
    if depth != tree.depth or fp != tree.fingerprint:
        raise FormatViolation(f"dataset was written for tree {fp} (H={depth}), "
                              f"got tree {tree.fingerprint} (H={tree.depth})")
    width = 1 + dim + depth
    anc = tree.ancestor_table(depth)
    feats = np.empty((len(lines) - 1, dim))
    labels = np.empty((len(lines) - 1, depth), dtype=np.int64)
    splits = []
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != width:
            raise FormatViolation(f"row {i}: {len(parts)} fields, expected {width}")
        if parts[0] not in SPLITS:
            raise FormatViolation(f"row {i}: unknown split {parts[0]!r}")
        try:
            feats[i] = [float(v) for v in parts[1:1 + dim]]
            labels[i] = [int(v) for v in parts[1 + dim:]]
        except ValueError as exc:
            raise FormatViolation(f"row {i}: {exc}") from None
        for h in range(depth):
            if not 0 <= labels[i, h] < tree.level_sizes[h]:
                raise FormatViolation(f"row {i}: label {labels[i, h]} out of range at level {h + 1}")
        if not np.array_equal(anc[:, labels[i, -1]], labels[i]):
            raise FormatViolation(f"row {i}: coarse labels are not ancestors of the leaf label")
        splits.append(parts[0])
    if not np.all(np.isfinite(feats)):
        raise FormatViolation("non-finite feature value")
    return Dataset(tree, feats, labels, np.array(splits))


def load(path: str | Path, tree: LabelTree) -> Dataset:
    return parse(Path(path).read_text(encoding="utf-8"), tree)
