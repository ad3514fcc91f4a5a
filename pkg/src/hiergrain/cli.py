"""Command-line front end: gen-data, train, eval, ablate, sweep.

Settings resolve as flag > config file > built-in default. Config files are
flat ``key = value`` text with ``#`` comments; keys match the long flag
names with dashes replaced by underscores. Every output directory gets a
``config.txt`` holding the fully resolved settings.

Exit codes: 0 success, 2 usage or config error, 3 IO failure,
4 non-finite loss during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DatasetSpec, FormatViolation, InvalidSpec, default_tree
from .hierarchy import TreeError, load_tree
from .metrics import histogram_csv
from .model import ModelConfig
from .objective import LossConfig
from .train import (
    METHODS,
    NonFiniteLoss,
    RunResult,
    TrainConfig,
    ablate,
    ablation_csv,
    checkpoint_dict,
    checkpoint_json,
    learner_from_checkpoint,
    method_setup,
    run,
    summarize,
)

OUTPUT_ROOT_ENV = "HIERGRAIN_OUTPUT_ROOT"
SWEEP_PARAMS = ("alpha", "beta", "epsilon", "gamma")
HEADLINE_METRICS = ("top1", "mistake_severity", "hier_dist@1", "hier_dist@5", "hier_dist@20")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


class FingerprintMismatch(ConfigError):
    pass


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return "" if value is None else str(value)


@dataclass(frozen=True)
class Option:
    parse: object
    default: object
    help: str


_TRAIN_DEFAULTS = TrainConfig()
_LOSS_DEFAULTS = LossConfig()
_MODEL_DEFAULTS = ModelConfig()

OPTIONS: dict[str, Option] = {
    "out": Option(str, None, f"output directory (default: ${OUTPUT_ROOT_ENV}/<command> or runs/<command>)"),
    "tree": Option(str, None, "label tree file (default: the built-in 4/12/36 tree)"),
    "data": Option(str, None, "dataset file written by gen-data"),
    "checkpoint": Option(str, None, "checkpoint.json written by train"),
    "split": Option(str, "test", "dataset split to evaluate"),
    # dataset generation
    "dim": Option(int, 32, "feature dimension"),
    "per_leaf": Option(int, 60, "samples per leaf class"),
    "spreads": Option(_float_list, list(DatasetSpec.spreads), "per-level center spreads, coarse to fine"),
    "noise": Option(float, DatasetSpec.noise, "sample noise around leaf centers"),
    "seed": Option(int, 0, "dataset seed"),
    "fractions": Option(_float_list, list(DatasetSpec.fractions), "train,val,test fractions"),
    # training
    "method": Option(str, "bilt-aigdl", f"one of {', '.join(METHODS)}"),
    "seeds": Option(_int_list, [0], "comma-separated training seeds"),
    "alpha": Option(float, _LOSS_DEFAULTS.alpha, "level weight exponent"),
    "beta": Option(float, _LOSS_DEFAULTS.beta, "weight of the learned difference matrix"),
    "epsilon": Option(float, _LOSS_DEFAULTS.epsilon, "smoothing mix"),
    "gamma": Option(float, _LOSS_DEFAULTS.gamma, "smoothing temperature"),
    "epochs": Option(int, _TRAIN_DEFAULTS.epochs, "training epochs"),
    "batch_size": Option(int, _TRAIN_DEFAULTS.batch_size, "mini-batch size"),
    "lr_encoder": Option(float, _TRAIN_DEFAULTS.lr_encoder, "base encoder learning rate"),
    "lr_head": Option(float, _TRAIN_DEFAULTS.lr_head, "base learning rate for heads, transforms and deltas"),
    "momentum": Option(float, _TRAIN_DEFAULTS.momentum, "SGD momentum"),
    "weight_decay": Option(float, _TRAIN_DEFAULTS.weight_decay, "weight decay"),
    "selection_metric": Option(str, _TRAIN_DEFAULTS.selection_metric, "top1 or mistake_severity"),
    "hidden1": Option(int, _MODEL_DEFAULTS.hidden1, "encoder width 1"),
    "hidden2": Option(int, _MODEL_DEFAULTS.hidden2, "encoder width 2"),
    "feature_dim": Option(int, _MODEL_DEFAULTS.feature_dim, "encoder output width"),
    # sweep
    "param": Option(str, None, f"one of {', '.join(SWEEP_PARAMS)}"),
    "values": Option(_float_list, None, "comma-separated values, at least two distinct"),
}

_DATA_KEYS = ("tree", "dim", "per_leaf", "spreads", "noise", "seed", "fractions")
_FIT_KEYS = ("tree", "data", "seeds", "alpha", "beta", "epsilon", "gamma", "epochs", "batch_size",
             "lr_encoder", "lr_head", "momentum", "weight_decay", "selection_metric",
             "hidden1", "hidden2", "feature_dim")

COMMANDS: dict[str, tuple[str, ...]] = {
    "gen-data": ("out",) + _DATA_KEYS,
    "train": ("out", "method") + _FIT_KEYS,
    "eval": ("out", "tree", "data", "checkpoint", "split"),
    "ablate": ("out",) + _FIT_KEYS,
    "sweep": ("out", "method", "param", "values") + _FIT_KEYS,
}


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(command: str, flags: dict[str, object], file_values: dict[str, str]) -> dict[str, object]:
    """Merge flag > file > default for the keys this command uses."""
    cfg: dict[str, object] = {}
    for key in COMMANDS[command]:
        opt = OPTIONS[key]
        if flags.get(key) is not None:
            cfg[key] = flags[key]
        elif key in file_values:
            try:
                cfg[key] = opt.parse(file_values[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
        else:
            cfg[key] = opt.default
    if cfg.get("out") is None:
        cfg["out"] = str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command)
    return cfg


def config_text(cfg: dict[str, object]) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _prepare_out(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {path} is not empty; pass --overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _matrix_csv(m: np.ndarray) -> str:
    return "".join(",".join(format(float(v), ".17g") for v in row) + "\n" for row in m)


def _require_file(cfg, key: str) -> Path:
    value = cfg.get(key)
    if value is None:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"{key} file not found: {path}")
    return path


def _tree(cfg):
    if cfg.get("tree") is None:
        return default_tree()
    return load_tree(_require_file(cfg, "tree"))


def _dataset(cfg, tree):
    return data_mod.load(_require_file(cfg, "data"), tree)


def _configs(cfg, dim: int) -> tuple[LossConfig, TrainConfig, ModelConfig]:
    loss = LossConfig(alpha=cfg["alpha"], beta=cfg["beta"], epsilon=cfg["epsilon"], gamma=cfg["gamma"])
    train = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr_encoder=cfg["lr_encoder"],
                        lr_head=cfg["lr_head"], momentum=cfg["momentum"],
                        weight_decay=cfg["weight_decay"], selection_metric=cfg["selection_metric"])
    model = ModelConfig(input_dim=dim, hidden1=cfg["hidden1"], hidden2=cfg["hidden2"],
                        feature_dim=cfg["feature_dim"])
    return loss, train, model


def _check_seeds(seeds) -> list[int]:
    if not seeds:
        raise ConfigError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds: {seeds}")
    return list(seeds)


def write_run(out: Path, result: RunResult, train_cfg: TrainConfig, meta: dict) -> None:
    """Run record, best checkpoint, test report and per-level CSV artifacts."""
    learner = result.learner
    result.test_report.meta.update(meta)
    _write(out / "run_record.json", json.dumps(result.record.to_dict(), indent=1, sort_keys=True))
    ckpt = checkpoint_dict(learner, result.record.best_snapshot, train_cfg)
    _write(out / "checkpoint.json", checkpoint_json(ckpt))
    _write(out / "eval_test.json", result.test_report.to_json())
    deltas = learner.delta_hats()
    costs = learner.cost_matrices()
    for h in range(1, learner.tree.depth + 1):
        if deltas is not None:
            _write(out / f"delta_hat_level{h}.csv", _matrix_csv(deltas[h - 1]))
            _write(out / f"effective_cost_level{h}.csv", _matrix_csv(costs[h - 1]))
        for rule, levels in result.test_report.rules.items():
            _write(out / f"histogram_{rule}_level{h}.csv", histogram_csv(levels[h - 1]))


def aggregate(results: dict[int, RunResult]) -> dict:
    out = {"seeds": sorted(results), "rule": next(iter(results.values())).rule, "metrics": {}}
    for name in HEADLINE_METRICS:
        values = [results[s].headline()[name] for s in sorted(results)]
        mean, spread = summarize(values)
        out["metrics"][name] = {"mean": mean, "spread": spread, "per_seed": values}
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, out: Path) -> None:
    tree = _tree(cfg)
    spec = DatasetSpec(tree, dim=cfg["dim"], per_leaf=cfg["per_leaf"], spreads=tuple(cfg["spreads"]),
                       noise=cfg["noise"], seed=cfg["seed"], fractions=tuple(cfg["fractions"]))
    ds = data_mod.generate(spec)
    data_mod.save(ds, out / "dataset.csv")
    _write(out / "tree.txt", tree.to_text())
    print(f"wrote {len(ds)} rows to {out / 'dataset.csv'}")
    print(f"dataset fingerprint {ds.fingerprint()}")


def cmd_train(cfg, out: Path) -> None:
    tree = _tree(cfg)
    ds = _dataset(cfg, tree)
    seeds = _check_seeds(cfg["seeds"])
    loss_cfg, train_cfg, model_cfg = _configs(cfg, ds.dim)
    kind, loss_cfg = method_setup(cfg["method"], loss_cfg)
    results = {}
    for seed in seeds:
        res = run(kind, ds, loss_cfg, train_cfg, seed, model_cfg)
        write_run(out / f"seed_{seed}", res, train_cfg,
                  {"method": cfg["method"], "seed": seed, "dataset": ds.fingerprint()})
        results[seed] = res
        h = res.headline()
        print(f"seed {seed}: top1 {h['top1']:.4f} mistake_severity {_fmt(h['mistake_severity'])}")
    agg = aggregate(results)
    agg["method"] = cfg["method"]
    _write(out / "aggregate.json", json.dumps(agg, indent=1, sort_keys=True))


def cmd_eval(cfg, out: Path) -> None:
    tree = _tree(cfg)
    path = _require_file(cfg, "checkpoint")
    try:
        ckpt = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from None
    if ckpt.get("tree_fingerprint") != tree.fingerprint:
        raise FingerprintMismatch(f"checkpoint tree {ckpt.get('tree_fingerprint')} "
                                  f"does not match tree {tree.fingerprint}")
    ds = _dataset(cfg, tree)
    if cfg["split"] not in data_mod.SPLITS:
        raise ConfigError(f"unknown split {cfg['split']!r}")
    learner = learner_from_checkpoint(ckpt, tree)
    x, y = ds.subset(cfg["split"])
    if len(y) == 0:
        raise ConfigError(f"split {cfg['split']!r} is empty")
    report = learner.evaluate(x, y, split=cfg["split"])
    report.meta.update({"config_hash": ckpt["config_hash"], "dataset": ds.fingerprint()})
    _write(out / f"eval_{cfg['split']}.json", report.to_json())
    for rule, levels in report.rules.items():
        rep = levels[-1]
        print(f"{rule}: top1 {rep.top1:.4f} mistake_severity {_fmt(rep.mistake_severity)}")


def cmd_ablate(cfg, out: Path) -> None:
    tree = _tree(cfg)
    ds = _dataset(cfg, tree)
    seeds = _check_seeds(cfg["seeds"])
    loss_cfg, train_cfg, model_cfg = _configs(cfg, ds.dim)
    rows = ablate(ds, loss_cfg, train_cfg, seeds, model_cfg=model_cfg,
                  progress=lambda flags, seed: print(f"done {flags} seed {seed}"))
    _write(out / "ablation.csv", ablation_csv(rows))


def cmd_sweep(cfg, out: Path) -> None:
    param, values = cfg["param"], cfg["values"]
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"--param must be one of {SWEEP_PARAMS}, got {param!r}")
    if not values or len(values) < 2:
        raise ConfigError("--values needs at least two values")
    if len(set(values)) != len(values):
        raise ConfigError(f"duplicate sweep values: {values}")
    tree = _tree(cfg)
    ds = _dataset(cfg, tree)
    seeds = _check_seeds(cfg["seeds"])
    loss_cfg, train_cfg, model_cfg = _configs(cfg, ds.dim)
    lines = [",".join(["param", "value", "seed", *HEADLINE_METRICS]) + "\n"]
    for value in values:
        kind, cell_cfg = method_setup(cfg["method"], replace(loss_cfg, **{param: value}))
        for seed in seeds:
            h = run(kind, ds, cell_cfg, train_cfg, seed, model_cfg).headline()
            cells = [param, repr(value), str(seed)] + ["" if h[m] is None else repr(h[m]) for m in HEADLINE_METRICS]
            lines.append(",".join(cells) + "\n")
            print(f"{param}={value} seed {seed}: top1 {h['top1']:.4f}")
    _write(out / "sweep.csv", "".join(lines))


HELP = {
    "gen-data": "generate a synthetic hierarchical dataset",
    "train": "train one method over one or more seeds",
    "eval": "evaluate a checkpoint under all three decision rules",
    "ablate": "run the 8-row component ablation grid",
    "sweep": "sweep one loss hyperparameter",
}

HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep": cmd_sweep}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiergrain", description="Hierarchical classification experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty output dir")
        for key in keys:
            opt = OPTIONS[key]
            default_note = "" if opt.default is None else f" (default: {_fmt(opt.default)})"
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=opt.parse, default=None,
                           help=opt.help + default_note)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "overwrite")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(command, flags, file_values)
        out = _prepare_out(Path(cfg["out"]), args.overwrite)
        _write(out / "config.txt", config_text(cfg))
        HANDLERS[command](cfg, out)
    except NonFiniteLoss as exc:
        print(f"error: non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InvalidSpec, FormatViolation, TreeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
