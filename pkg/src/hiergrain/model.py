"""Encoder and the two head topologies: the BiLT chain and the parallel baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Parameter,
    RunningStats,
    ShapeMismatch,
    Tensor,
    affine,
    as_tensor,
    batchnorm1d,
    elu,
)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    hidden1: int = 64
    hidden2: int = 64
    feature_dim: int = 64


class Linear:
    def __init__(self, n_in: int, n_out: int):
        self.weight = Parameter(np.zeros((n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class BatchNorm:
    def __init__(self, n: int):
        self.gamma = Parameter(np.ones(n))
        self.beta = Parameter(np.zeros(n))
        self.stats = RunningStats.fresh(n)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm1d(x, self.gamma, self.beta, self.stats, train)


class Encoder:
    """Three affine layers with ELU after the first two."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.layers = [
            Linear(cfg.input_dim, cfg.hidden1),
            Linear(cfg.hidden1, cfg.hidden2),
            Linear(cfg.hidden2, cfg.feature_dim),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = elu(h)
        return h

    def named_modules(self):
        for i, layer in enumerate(self.layers):
            yield f"encoder.{i}", layer


class Transform:
    """batchnorm -> width-preserving affine -> batchnorm -> ELU."""

    def __init__(self, width: int):
        self.bn_in = BatchNorm(width)
        self.linear = Linear(width, width)
        self.bn_out = BatchNorm(width)

    def __call__(self, z: Tensor, train: bool) -> Tensor:
        return elu(self.bn_out(self.linear(self.bn_in(z, train)), train))


class _Heads:
    """Shared plumbing: parameter naming, buffers, init, eval snapshots."""

    kind = ""

    def __init__(self, level_sizes, cfg: ModelConfig):
        self.level_sizes = tuple(int(c) for c in level_sizes)
        self.cfg = cfg
        self.encoder = Encoder(cfg)

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    def named_modules(self):
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, mod in self.named_modules():
            if isinstance(mod, Linear):
                out[f"{name}.weight"] = mod.weight
                out[f"{name}.bias"] = mod.bias
            else:
                out[f"{name}.gamma"] = mod.gamma
                out[f"{name}.beta"] = mod.beta
        return out

    def named_buffers(self) -> dict[str, RunningStats]:
        return {name: mod.stats for name, mod in self.named_modules() if isinstance(mod, BatchNorm)}

    def parameter_group(self, name: str) -> str:
        return "encoder" if name.startswith("encoder.") else "head"

    @staticmethod
    def is_decay_exempt(name: str) -> bool:
        return name.endswith(".gamma") or name.endswith(".beta")

    def init_parameters(self, seed: int):
        rng = np.random.default_rng(seed)
        for _, mod in self.named_modules():
            if isinstance(mod, Linear):
                fan_in = mod.weight.shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                mod.weight.data[...] = rng.uniform(-bound, bound, size=mod.weight.shape)
                mod.bias.data[...] = 0.0
            else:
                mod.gamma.data[...] = 1.0
                mod.beta.data[...] = 0.0
                mod.stats.mean = np.zeros_like(mod.stats.mean)
                mod.stats.var = np.ones_like(mod.stats.var)
        return self

    def _check_input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ShapeMismatch(f"expected input of width {self.cfg.input_dim}, got {x.shape}")
        return x

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of parameters and running statistics."""
        out = {k: p.data for k, p in self.named_parameters().items()}
        for k, s in self.named_buffers().items():
            out[f"{k}.running_mean"] = s.mean
            out[f"{k}.running_var"] = s.var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(self.state_arrays())
        if set(snap) != expected:
            missing = sorted(expected - set(snap))
            extra = sorted(set(snap) - expected)
            raise KeyError(f"snapshot mismatch; missing={missing} extra={extra}")
        for k, v in snap.items():
            v = np.asarray(v, dtype=np.float64)
            if k in params:
                if params[k].shape != v.shape:
                    raise ShapeMismatch(f"{k}: {params[k].shape} vs {v.shape}")
                params[k].data[...] = v
            else:
                base, attr = k.rsplit(".", 1)
                setattr(buffers[base], "mean" if attr == "running_mean" else "var", v.copy())

    def predict_logits(self, x: np.ndarray, batch_size: int = 512) -> list[np.ndarray]:
        """Eval-mode logits per level, as plain arrays."""
        outs: list[list[np.ndarray]] = [[] for _ in range(self.depth)]
        for start in range(0, len(x), batch_size):
            zs = self.forward(x[start:start + batch_size], train=False)
            for h, z in enumerate(zs):
                outs[h].append(z.data)
        return [np.concatenate(o, axis=0) for o in outs]


class BiltModel(_Heads):
    """Finest head on encoder features; each coarser head reads the next finer logits.

    ``forward`` returns logits ordered coarse to fine, ``[z^1, ..., z^H]``.
    """

    kind = "bilt"

    def __init__(self, level_sizes, cfg: ModelConfig = ModelConfig()):
        super().__init__(level_sizes, cfg)
        sizes = self.level_sizes
        self.fine_head = Linear(cfg.feature_dim, sizes[-1])
        # index h-1 holds g^h / f^h for h = 1..H-1
        self.transforms = [Transform(sizes[h]) for h in range(1, self.depth)]
        self.heads = [Linear(sizes[h], sizes[h - 1]) for h in range(1, self.depth)]

    def named_modules(self):
        yield from self.encoder.named_modules()
        yield f"head.{self.depth}", self.fine_head
        for h in range(1, self.depth):
            t = self.transforms[h - 1]
            yield f"transform.{h}.bn_in", t.bn_in
            yield f"transform.{h}.linear", t.linear
            yield f"transform.{h}.bn_out", t.bn_out
            yield f"head.{h}", self.heads[h - 1]

    def forward(self, x, train: bool = True) -> list[Tensor]:
        x = self._check_input(x)
        z = self.fine_head(self.encoder(x))
        logits = [z]
        for h in range(self.depth - 1, 0, -1):
            z = self.heads[h - 1](self.transforms[h - 1](z, train))
            logits.append(z)
        return logits[::-1]


class ParallelBaseline(_Heads):
    """Independent linear head per level, all on the shared encoder features."""

    kind = "baseline"

    def __init__(self, level_sizes, cfg: ModelConfig = ModelConfig()):
        super().__init__(level_sizes, cfg)
        self.heads = [Linear(cfg.feature_dim, c) for c in self.level_sizes]

    def named_modules(self):
        yield from self.encoder.named_modules()
        for h, head in enumerate(self.heads, start=1):
            yield f"head.{h}", head

    def forward(self, x, train: bool = True) -> list[Tensor]:
        feats = self.encoder(self._check_input(x))
        return [head(feats) for head in self.heads]


def build_model(kind: str, level_sizes, cfg: ModelConfig = ModelConfig(), seed: int | None = None):
    classes = {"bilt": BiltModel, "baseline": ParallelBaseline}
    if kind not in classes:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(classes)}")
    model = classes[kind](level_sizes, cfg)
    if seed is not None:
        model.init_parameters(seed)
    return model
