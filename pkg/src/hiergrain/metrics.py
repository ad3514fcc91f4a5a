"""Hierarchy-aware evaluation: Top-1, mistake severity, Hier Dist@k, mistake histograms.

All distances are LCA heights taken from a level's distance matrix.
Mistake severity averages only over mistaken samples and is ``None``
when there are none.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

HIER_DIST_KS = (1, 5, 20)


class MetricError(ValueError):
    pass


class LengthMismatch(MetricError):
    pass


class EmptyInput(MetricError):
    pass


class BadK(MetricError):
    pass


class NoMistakes(MetricError):
    pass


def _pair(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape[0] != truths.shape[0]:
        raise LengthMismatch(f"{preds.shape[0]} predictions vs {truths.shape[0]} truths")
    if truths.shape[0] == 0:
        raise EmptyInput("no samples")
    return preds, truths


def top1(preds, truths) -> float:
    preds, truths = _pair(preds, truths)
    return float(np.mean(preds == truths))


def mistake_severity(preds, truths, dist) -> float | None:
    preds, truths = _pair(preds, truths)
    wrong = preds != truths
    if not wrong.any():
        return None
    return float(np.mean(np.asarray(dist)[preds[wrong], truths[wrong]]))


def topk_from_logits(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the smaller index."""
    logits = np.asarray(logits)
    if not 1 <= k <= logits.shape[1]:
        raise BadK(f"k={k} outside 1..{logits.shape[1]}")
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k]


def hier_dist_at_k(topk_preds, truths, dist, k: int) -> float:
    topk_preds = np.asarray(topk_preds, dtype=np.int64)
    dist = np.asarray(dist)
    if topk_preds.ndim != 2 or topk_preds.shape[1] != k:
        raise BadK(f"expected {k} predictions per sample, got shape {topk_preds.shape}")
    if not 1 <= k <= dist.shape[0]:
        raise BadK(f"k={k} outside 1..{dist.shape[0]}")
    for row in topk_preds:
        if len(set(row.tolist())) != k:
            raise BadK("top-k predictions must be distinct classes")
    _, truths = _pair(topk_preds, truths)
    return float(np.mean(dist[topk_preds, truths[:, None]].mean(axis=1)))


def mistake_histogram(preds, truths, dist) -> dict[int, float]:
    preds, truths = _pair(preds, truths)
    wrong = preds != truths
    if not wrong.any():
        raise NoMistakes("histogram undefined without mistakes")
    d = np.asarray(dist)[preds[wrong], truths[wrong]]
    values, counts = np.unique(d, return_counts=True)
    return {int(v): float(c) / d.size for v, c in zip(values, counts)}


@dataclass
class LevelReport:
    level: int
    top1: float
    mistake_severity: float | None
    hier_dist: dict[int, float | None]
    histogram: dict[int, float] = field(default_factory=dict)


def evaluate_level(level: int, preds, truths, ranking_logits, dist) -> LevelReport:
    """Metrics for one level; Hier Dist@k is ``None`` when k exceeds the class count."""
    preds, truths = _pair(preds, truths)
    c = np.asarray(dist).shape[0]
    hd: dict[int, float | None] = {}
    for k in HIER_DIST_KS:
        if k == 1:
            topk = preds[:, None]
        elif k <= c:
            topk = topk_from_logits(ranking_logits, k)
        else:
            hd[k] = None
            continue
        hd[k] = hier_dist_at_k(topk, truths, dist, k)
    hist = mistake_histogram(preds, truths, dist) if np.any(preds != truths) else {}
    return LevelReport(level, top1(preds, truths), mistake_severity(preds, truths, dist), hd, hist)


@dataclass
class EvalReport:
    """Per-level reports for each decision rule (``argmax``, ``crm``, ``augmented``)."""

    rules: dict[str, list[LevelReport]]
    split: str = "test"
    meta: dict = field(default_factory=dict)

    def level(self, rule: str, h: int) -> LevelReport:
        return self.rules[rule][h - 1]

    def to_dict(self) -> dict:
        out = {"split": self.split, "meta": self.meta, "rules": {}}
        for rule, levels in self.rules.items():
            rows = []
            for rep in levels:
                d = asdict(rep)
                d["hier_dist"] = {f"@{k}": v for k, v in rep.hier_dist.items()}
                d["histogram"] = {str(k): v for k, v in rep.histogram.items()}
                rows.append(d)
            out["rules"][rule] = rows
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["split", "meta", "rules"],
    "properties": {
        "split": {"type": "string"},
        "meta": {"type": "object"},
        "rules": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["level", "top1", "mistake_severity", "hier_dist", "histogram"],
                    "properties": {
                        "level": {"type": "integer", "minimum": 1},
                        "top1": {"type": "number", "minimum": 0, "maximum": 1},
                        "mistake_severity": {"type": ["number", "null"], "minimum": 0},
                        "hier_dist": {
                            "type": "object",
                            "additionalProperties": {"type": ["number", "null"]},
                        },
                        "histogram": {
                            "type": "object",
                            "additionalProperties": {"type": "number"},
                        },
                    },
                },
            },
        },
    },
}


def histogram_csv(report: LevelReport) -> str:
    lines = ["lca_distance,probability\n"]
    for d in sorted(report.histogram):
        lines.append(f"{d},{report.histogram[d]!r}\n")
    return "".join(lines)
