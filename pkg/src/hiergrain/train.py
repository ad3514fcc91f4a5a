"""SGD training loop, cosine schedule, evaluation under three decision rules, ablations."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .aigdl import DeltaBank, augmented_decide, crm_decide
from .data import Dataset
from .diffcore import NonFiniteError, Parameter, ShapeMismatch, softmax_np
from .metrics import EvalReport, evaluate_level
from .model import ModelConfig, build_model
from .objective import LossConfig, check_label_consistency, total_loss

DECISION_RULES = ("argmax", "crm", "augmented")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_encoder: float = 0.01
    lr_head: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    selection_metric: str = "top1"
    selection_rule: str = "augmented"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")
        if self.lr_encoder <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")
        if self.selection_metric not in ("top1", "mistake_severity"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")
        if self.selection_rule not in DECISION_RULES:
            raise ValueError(f"unknown decision rule {self.selection_rule!r}")


# ---------------------------------------------------------------------------
# Optimizer pieces
# ---------------------------------------------------------------------------


def cosine_lr(lr0: float, t: int, total: int) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside 0..{total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class ParamSlot:
    param: Parameter
    group: str
    decay: bool
    velocity: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = np.zeros_like(self.param.data)


def sgd_step(slot: ParamSlot, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum * v + (g + wd * w);  w <- w - lr * v."""
    p = slot.param
    if p.grad.shape != p.data.shape or slot.velocity.shape != p.data.shape:
        raise ShapeMismatch(f"gradient/velocity shape mismatch for {p.shape}")
    if not np.all(np.isfinite(p.grad)):
        raise NonFiniteError("non-finite gradient")
    g = p.grad + weight_decay * p.data if slot.decay else p.grad
    slot.velocity = momentum * slot.velocity + g
    p.data -= lr * slot.velocity


class Learner:
    """A model plus (optionally) its difference-matrix bank and optimizer state."""

    def __init__(self, kind: str, tree, model_cfg: ModelConfig, loss_cfg: LossConfig, seed: int):
        self.kind = kind
        self.tree = tree
        self.model_cfg = model_cfg
        self.loss_cfg = loss_cfg
        self.seed = seed
        self.model = build_model(kind, tree.level_sizes, model_cfg, seed=seed)
        self.bank: DeltaBank | None = (loss_cfg.make_bank(tree.level_sizes)
                                       if loss_cfg.include_aigdl else None)
        self.distances = [tree.distance_matrix(h).astype(np.float64) for h in range(1, tree.depth + 1)]
        self.slots: dict[str, ParamSlot] = {}
        for name, p in self.model.named_parameters().items():
            self.slots[name] = ParamSlot(p, self.model.parameter_group(name),
                                         decay=not self.model.is_decay_exempt(name))
        if self.bank is not None:
            for name, p in self.bank.named_parameters().items():
                self.slots[name] = ParamSlot(p, "head", decay=False)

    def parameters(self) -> dict[str, Parameter]:
        return {k: s.param for k, s in self.slots.items()}

    def loss(self, x: np.ndarray, labels: np.ndarray, train: bool = True):
        logits = self.model.forward(x, train=train)
        return total_loss(logits, labels, self.loss_cfg, self.bank, self.distances)

    # -- state -------------------------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = self.model.snapshot()
        if self.bank is not None:
            for k, p in self.bank.named_parameters().items():
                snap[k] = p.data.copy()
        return snap

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        model_part = {k: v for k, v in snap.items() if not k.startswith("delta.")}
        self.model.load_snapshot(model_part)
        if self.bank is not None:
            for k, p in self.bank.named_parameters().items():
                p.data[...] = snap[k]

    def cost_matrices(self) -> list[np.ndarray]:
        """Effective cost per level; -D when there is no learned bank."""
        if self.bank is None:
            return [-d for d in self.distances]
        return [self.bank.cost_array(h, self.distances[h - 1]) for h in range(1, self.tree.depth + 1)]

    def delta_hats(self) -> list[np.ndarray] | None:
        if self.bank is None:
            return None
        return [self.bank.delta_hat(h).data for h in range(1, self.tree.depth + 1)]

    def evaluate(self, x: np.ndarray, labels: np.ndarray, split: str = "test",
                 rules=DECISION_RULES) -> EvalReport:
        logits = self.model.predict_logits(x)
        costs = self.cost_matrices()
        out: dict[str, list] = {}
        for rule in rules:
            levels = []
            for h in range(1, self.tree.depth + 1):
                z = logits[h - 1]
                dist = self.distances[h - 1]
                if rule == "argmax":
                    scores = z
                    preds = np.argmax(z, axis=1)
                else:
                    p = softmax_np(z)
                    if rule == "crm":
                        scores = -(p @ dist.T)
                        preds = crm_decide(p, dist)
                    else:
                        scores = p @ costs[h - 1].T
                        preds = augmented_decide(p, costs[h - 1])
                levels.append(evaluate_level(h, preds, labels[:, h - 1], scores,
                                             self.tree.distance_matrix(h)))
            out[rule] = levels
        return EvalReport(out, split=split)


# ---------------------------------------------------------------------------
# Run records and checkpoints
# ---------------------------------------------------------------------------


def config_hash(*parts) -> str:
    blob = json.dumps([p if isinstance(p, dict) else asdict(p) for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def checkpoint_dict(learner: Learner, snap: dict[str, np.ndarray], train_cfg: TrainConfig) -> dict:
    return {
        "format": "hiergrain-checkpoint v1",
        "kind": learner.kind,
        "seed": learner.seed,
        "tree_fingerprint": learner.tree.fingerprint,
        "level_sizes": list(learner.tree.level_sizes),
        "model_config": asdict(learner.model_cfg),
        "loss_config": learner.loss_cfg.to_dict(),
        "config_hash": config_hash(learner.model_cfg, learner.loss_cfg, train_cfg),
        "tensors": {k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]}
                    for k, v in sorted(snap.items())},
    }


def checkpoint_json(ckpt: dict) -> str:
    return json.dumps(ckpt, sort_keys=True, indent=1)


def learner_from_checkpoint(ckpt: dict, tree) -> Learner:
    if ckpt.get("format") != "hiergrain-checkpoint v1":
        raise ValueError("not a hiergrain checkpoint")
    if ckpt["tree_fingerprint"] != tree.fingerprint:
        raise ValueError(f"checkpoint tree {ckpt['tree_fingerprint']} != tree {tree.fingerprint}")
    learner = Learner(ckpt["kind"], tree, ModelConfig(**ckpt["model_config"]),
                      LossConfig(**ckpt["loss_config"]), ckpt["seed"])
    snap = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in ckpt["tensors"].items()}
    learner.load_snapshot(snap)
    return learner


@dataclass
class RunRecord:
    seed: int
    kind: str
    train_loss: list[float] = field(default_factory=list)
    lr_trace: list[dict[str, float]] = field(default_factory=list)
    val_top1: list[list[float]] = field(default_factory=list)
    val_severity: list[list[float | None]] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = -math.inf
    best_snapshot: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("best_snapshot")
        return d


def _selection_score(report: EvalReport, rule: str, metric: str) -> float:
    rep = report.level(rule, len(report.rules[rule]))
    if metric == "top1":
        return rep.top1
    sev = rep.mistake_severity
    return 0.0 if sev is None else -sev


def fit(learner: Learner, dataset: Dataset, train_cfg: TrainConfig, on_step=None) -> RunRecord:
    """Train with per-epoch cosine LR and keep the best validation snapshot.

    ``on_step(epoch, step, learner)`` runs after every optimizer update.
    """
    if dataset.tree.fingerprint != learner.tree.fingerprint:
        raise ValueError("dataset tree does not match the model tree")
    check_label_consistency(learner.tree, dataset.labels)
    x_tr, y_tr = dataset.subset("train")
    x_val, y_val = dataset.subset("val")
    if len(x_tr) < train_cfg.batch_size:
        raise ValueError(f"{len(x_tr)} training rows < batch size {train_cfg.batch_size}")
    rule = train_cfg.selection_rule

    rng = np.random.default_rng(learner.seed + 1_000_003)
    record = RunRecord(seed=learner.seed, kind=learner.kind)
    base = {"encoder": train_cfg.lr_encoder, "head": train_cfg.lr_head}
    n_batches = len(x_tr) // train_cfg.batch_size
    for epoch in range(train_cfg.epochs):
        lrs = {g: cosine_lr(lr0, epoch, train_cfg.epochs) for g, lr0 in base.items()}
        record.lr_trace.append(lrs)
        order = rng.permutation(len(x_tr))
        total = 0.0
        for b in range(n_batches):
            idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            for s in learner.slots.values():
                s.param.zero_grad()
            try:
                loss = learner.loss(x_tr[idx], y_tr[idx], train=True)
            except NonFiniteError as exc:
                raise NonFiniteLoss(f"epoch {epoch} step {b}: {exc}") from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"epoch {epoch} step {b}: loss {value}")
            loss.backward()
            for s in learner.slots.values():
                wd = train_cfg.weight_decay if s.decay else 0.0
                sgd_step(s, lrs[s.group], train_cfg.momentum, wd)
            if on_step is not None:
                on_step(epoch, b, learner)
            total += value
        record.train_loss.append(total / n_batches)

        report = learner.evaluate(x_val, y_val, split="val", rules=(rule,))
        record.val_top1.append([r.top1 for r in report.rules[rule]])
        record.val_severity.append([r.mistake_severity for r in report.rules[rule]])
        score = _selection_score(report, rule, train_cfg.selection_metric)
        if score > record.best_score:
            record.best_score = score
            record.best_epoch = epoch
            record.best_snapshot = learner.snapshot()
    learner.load_snapshot(record.best_snapshot)
    return record


# ---------------------------------------------------------------------------
# Methods and ablations
# ---------------------------------------------------------------------------

METHODS = {
    # name: (model kind, loss flag overrides)
    "bilt-aigdl": ("bilt", dict(include_bilt=True, include_aigdl=True, include_smoothing=True)),
    "bilt": ("bilt", dict(include_bilt=True, include_aigdl=False, include_smoothing=False)),
    "baseline": ("baseline", dict(include_bilt=True, include_aigdl=False, include_smoothing=False)),
}

def method_setup(method: str, loss_cfg: LossConfig) -> tuple[str, LossConfig]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    kind, flags = METHODS[method]
    return kind, replace(loss_cfg, **flags)


def headline_rule(loss_cfg: LossConfig) -> str:
    """Decision rule behind a configuration's reported test numbers."""
    if loss_cfg.include_aigdl:
        return "augmented"
    return "argmax"


@dataclass
class RunResult:
    record: RunRecord
    learner: Learner
    test_report: EvalReport
    rule: str

    def headline(self) -> dict[str, float | None]:
        rep = self.test_report.level(self.rule, self.learner.tree.depth)
        return {"top1": rep.top1, "mistake_severity": rep.mistake_severity,
                "hier_dist@1": rep.hier_dist.get(1), "hier_dist@5": rep.hier_dist.get(5),
                "hier_dist@20": rep.hier_dist.get(20)}


def run(kind: str, dataset: Dataset, loss_cfg: LossConfig, train_cfg: TrainConfig,
        seed: int, model_cfg: ModelConfig | None = None) -> RunResult:
    model_cfg = model_cfg or ModelConfig(input_dim=dataset.dim)
    rule = headline_rule(loss_cfg)
    train_cfg = replace(train_cfg, selection_rule=rule)
    learner = Learner(kind, dataset.tree, model_cfg, loss_cfg, seed)
    record = fit(learner, dataset, train_cfg)
    x_te, y_te = dataset.subset("test")
    report = learner.evaluate(x_te, y_te, split="test")
    return RunResult(record, learner, report, rule)


ABLATION_COLUMNS = ("bilt", "aigdl", "smoothing")


def ablation_grid() -> list[tuple[bool, bool, bool]]:
    return list(itertools.product((False, True), repeat=3))


def ablation_cell(flags: tuple[bool, bool, bool], loss_cfg: LossConfig) -> tuple[str, LossConfig]:
    """BiLT toggles the head topology; AIGDL and smoothing toggle loss terms."""
    use_bilt, use_aigdl, use_smooth = flags
    kind = "bilt" if use_bilt else "baseline"
    cfg = replace(loss_cfg, include_bilt=True, include_aigdl=use_aigdl, include_smoothing=use_smooth)
    return kind, cfg


def summarize(values: list[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


@dataclass
class AblationRow:
    flags: tuple[bool, bool, bool]
    results: list[RunResult]

    def metric(self, name: str) -> list[float | None]:
        return [r.headline()[name] for r in self.results]


def ablate(dataset: Dataset, loss_cfg: LossConfig, train_cfg: TrainConfig, seeds,
           grid=None, model_cfg: ModelConfig | None = None, progress=None) -> list[AblationRow]:
    grid = list(grid) if grid is not None else ablation_grid()
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    for flags in grid:
        kind, cfg = ablation_cell(flags, loss_cfg)
        results = []
        for seed in seeds:
            results.append(run(kind, dataset, cfg, train_cfg, seed, model_cfg))
            if progress:
                progress(flags, seed)
        rows.append(AblationRow(tuple(flags), results))
    return rows


ABLATION_METRICS = ("mistake_severity", "hier_dist@1", "hier_dist@5", "top1")


def ablation_csv(rows: list[AblationRow]) -> str:
    head = list(ABLATION_COLUMNS)
    for m in ABLATION_METRICS:
        head += [f"{m}_mean", f"{m}_spread"]
    lines = [",".join(head + ["seeds"]) + "\n"]
    for row in rows:
        cells = ["1" if f else "0" for f in row.flags]
        for m in ABLATION_METRICS:
            mean, spread = summarize(row.metric(m))
            cells += ["" if mean is None else repr(mean), "" if spread is None else repr(spread)]
        cells.append(str(len(row.results)))
        lines.append(",".join(cells) + "\n")
    return "".join(lines)
