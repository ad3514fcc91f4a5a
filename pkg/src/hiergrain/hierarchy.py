"""Label trees of uniform depth and their LCA distance matrices.

A tree file lists one leaf per line as a ``/``-separated path of
exactly H names, coarsest first. Blank lines and ``#`` comments are
ignored. Class indices at each level follow order of first appearance,
and a class is identified by its full path prefix, so the same name may
occur under two different parents.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class TreeError(ValueError):
    pass


class InconsistentDepth(TreeError):
    pass


class DuplicateLeaf(TreeError):
    pass


class EmptyTree(TreeError):
    pass


class IndexOutOfRange(TreeError, IndexError):
    pass


@dataclass(frozen=True)
class LabelTree:
    """Immutable H-level hierarchy.

    ``parents[h - 1][i]`` is the level-(h-1) parent of class ``i`` at level
    ``h``; for level 1 every parent is 0, the implicit root.
    """

    level_sizes: tuple[int, ...]
    parents: tuple[tuple[int, ...], ...]
    names: tuple[tuple[str, ...], ...]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.level_sizes:
            raise EmptyTree("tree has no levels")
        if len(self.parents) != self.depth or len(self.names) != self.depth:
            raise TreeError("parents/names must have one entry per level")
        prev = 1
        for h, size in enumerate(self.level_sizes, start=1):
            if size < prev:
                raise TreeError(f"level {h} has {size} classes, fewer than level {h - 1}")
            par = self.parents[h - 1]
            if len(par) != size or len(self.names[h - 1]) != size:
                raise TreeError(f"level {h}: parent/name list length != {size}")
            if any(not 0 <= p < prev for p in par):
                raise TreeError(f"level {h}: parent index out of range")
            if set(par) != set(range(prev)):
                raise TreeError(f"level {h - 1} has a class without children")
            prev = size

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    @property
    def num_leaves(self) -> int:
        return self.level_sizes[-1]

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.depth:
            raise IndexOutOfRange(f"level {level} outside 1..{self.depth}")

    def _check_class(self, level: int, cls: int) -> None:
        self._check_level(level)
        if not 0 <= cls < self.level_sizes[level - 1]:
            raise IndexOutOfRange(f"class {cls} outside 0..{self.level_sizes[level - 1] - 1} at level {level}")

    def parent(self, level: int, cls: int) -> int:
        self._check_class(level, cls)
        return self.parents[level - 1][cls]

    def ancestor_label(self, from_level: int, to_level: int, cls: int) -> int:
        self._check_class(from_level, cls)
        self._check_level(to_level)
        if to_level > from_level:
            raise IndexOutOfRange(f"to_level {to_level} is finer than from_level {from_level}")
        for h in range(from_level, to_level, -1):
            cls = self.parents[h - 1][cls]
        return cls

    def ancestor_table(self, level: int) -> np.ndarray:
        """Integer array A of shape (level, C^level); A[l-1, i] is i's ancestor at level l."""
        self._check_level(level)
        key = ("anc", level)
        if key not in self._cache:
            table = np.zeros((level, self.level_sizes[level - 1]), dtype=np.int64)
            cur = np.arange(self.level_sizes[level - 1])
            for h in range(level, 0, -1):
                table[h - 1] = cur
                cur = np.asarray(self.parents[h - 1], dtype=np.int64)[cur]
            table.setflags(write=False)
            self._cache[key] = table
        return self._cache[key]

    def lca_height(self, level: int, i: int, j: int) -> int:
        self._check_class(level, i)
        self._check_class(level, j)
        steps = 0
        while i != j:
            i = self.parents[level - 1 - steps][i]
            j = self.parents[level - 1 - steps][j]
            steps += 1
            if steps == level:
                break
        return steps

    def distance_matrix(self, level: int) -> np.ndarray:
        """Read-only C x C matrix of LCA heights at ``level``."""
        self._check_level(level)
        key = ("dist", level)
        if key not in self._cache:
            anc = self.ancestor_table(level)
            dist = np.full((anc.shape[1], anc.shape[1]), level, dtype=np.int64)
            for lv in range(1, level + 1):
                same = anc[lv - 1][:, None] == anc[lv - 1][None, :]
                dist[same] = level - lv
            dist.setflags(write=False)
            self._cache[key] = dist
        return self._cache[key]

    def leaf_paths(self) -> list[tuple[str, ...]]:
        anc = self.ancestor_table(self.depth)
        return [tuple(self.names[h][anc[h, leaf]] for h in range(self.depth))
                for leaf in range(self.num_leaves)]

    def to_text(self) -> str:
        return "".join("/".join(p) + "\n" for p in self.leaf_paths())

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def parse_tree(text: str) -> LabelTree:
    rows: list[list[str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        segs = [s.strip() for s in line.split("/")]
        if any(not s for s in segs):
            raise InconsistentDepth(f"line {lineno}: empty path segment")
        if rows and len(segs) != len(rows[0]):
            raise InconsistentDepth(
                f"line {lineno}: {len(segs)} segments, expected {len(rows[0])}")
        rows.append(segs)
    if not rows:
        raise EmptyTree("no leaf paths found")

    depth = len(rows[0])
    index: list[dict[tuple[str, ...], int]] = [{} for _ in range(depth)]
    parents: list[list[int]] = [[] for _ in range(depth)]
    names: list[list[str]] = [[] for _ in range(depth)]
    for segs in rows:
        full = tuple(segs)
        if full in index[-1]:
            raise DuplicateLeaf(f"duplicate leaf path {'/'.join(full)}")
        parent_idx = 0
        for h in range(depth):
            prefix = full[: h + 1]
            if prefix not in index[h]:
                index[h][prefix] = len(names[h])
                names[h].append(segs[h])
                parents[h].append(parent_idx)
            parent_idx = index[h][prefix]
    return LabelTree(
        level_sizes=tuple(len(n) for n in names),
        parents=tuple(tuple(p) for p in parents),
        names=tuple(tuple(n) for n in names),
    )


def load_tree(path: str | Path) -> LabelTree:
    return parse_tree(Path(path).read_text(encoding="utf-8"))


def balanced_tree(branching: list[int] | tuple[int, ...], prefix: str = "n") -> LabelTree:
    """Uniform tree where level h has ``branching[h-1]`` children per node."""
    if not branching or any(b < 1 for b in branching):
        raise TreeError("branching factors must be positive")
    lines = []
    for combo in itertools.product(*(range(b) for b in branching)):
        segs = [prefix + "_".join(str(c) for c in combo[: h + 1]) for h in range(len(branching))]
        lines.append("/".join(segs))
    return parse_tree("\n".join(lines))


def distance_matrix_csv(tree: LabelTree, level: int) -> str:
    dist = tree.distance_matrix(level)
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in dist)
