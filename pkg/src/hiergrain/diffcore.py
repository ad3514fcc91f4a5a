"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the primitives the hierarchical heads and losses need are provided.
Every op records its parents and a backward closure on the output tensor;
``Tensor.backward`` walks the recorded graph once in reverse topological
order and then releases the saved activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
FD_STEP = 1e-5


class DiffError(Exception):
    pass


class ShapeMismatch(DiffError, ValueError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


class DegenerateBatch(DiffError, ValueError):
    pass


class InvalidTarget(DiffError, ValueError):
    pass


class GraphConsumed(DiffError, RuntimeError):
    pass


class Tensor:
    """Dense float64 array that may sit inside a recorded graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    # Convenience arithmetic; each maps onto one recorded op.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumed("backward already ran on this graph; run a new forward pass")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and isinstance(node, Parameter):
                    node.grad += g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


class Parameter(Tensor):
    """Leaf tensor whose gradient is accumulated across backward passes."""

    __slots__ = ("requires_update",)

    def __init__(self, data, requires_update: bool = True):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.requires_update = requires_update

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out(data: np.ndarray, parents, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced in forward pass")
    return Tensor(data, parents, backward)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape == b.shape, f"add: {a.shape} vs {b.shape}")
    return _out(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _out(a.data * c, (a,), lambda g: (g * c,))


def linear_combination(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Return sum_i w_i * t_i for same-shaped tensors."""
    _require(len(terms) == len(weights) and len(terms) > 0, "linear_combination: bad arity")
    shape = terms[0].shape
    for t in terms:
        _require(t.shape == shape, f"linear_combination: {t.shape} vs {shape}")
    ws = [float(w) for w in weights]
    data = np.zeros(shape)
    for t, w in zip(terms, ws):
        data = data + w * t.data
    return _out(data, tuple(terms), lambda g: tuple(g * w for w in ws))


def weighted_sum(a: Tensor, w) -> Tensor:
    """Scalar sum(w * a) for a constant weight array of the same shape."""
    w = np.asarray(w, dtype=np.float64)
    _require(w.shape == a.shape, f"weighted_sum: {w.shape} vs {a.shape}")
    return _out(np.asarray(np.sum(w * a.data)), (a,), lambda g: (float(g) * w,))


def mask_diagonal(m: Tensor) -> Tensor:
    _require(m.data.ndim == 2 and m.shape[0] == m.shape[1], f"mask_diagonal: not square {m.shape}")
    keep = 1.0 - np.eye(m.shape[0])
    return _out(m.data * keep, (m,), lambda g: (g * keep,))


def take_rows(m: Tensor, idx) -> Tensor:
    """Gather rows ``m[idx]``; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    _require(m.data.ndim == 2, "take_rows: expects a matrix")
    n = m.shape[0]

    def backward(g):
        gm = np.zeros((n, m.shape[1]))
        np.add.at(gm, idx, g)
        return (gm,)

    return _out(m.data[idx], (m,), backward)


def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    ex = np.exp(np.minimum(x.data, 0.0))
    y = np.where(pos, x.data, ex - 1.0)
    return _out(y, (x,), lambda g: (g * np.where(pos, 1.0, ex),))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x (B, n), w (n, m), b (m,)."""
    _require(x.data.ndim == 2 and w.data.ndim == 2, "affine: x and w must be matrices")
    _require(x.shape[1] == w.shape[0], f"affine: x {x.shape} vs w {w.shape}")
    _require(b.shape == (w.shape[1],), f"affine: b {b.shape} vs w {w.shape}")

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _out(x.data @ w.data + b.data, (x, w, b), backward)


def matvec_rows(m: Tensor, p: Tensor) -> Tensor:
    """Apply ``m`` to every row of ``p``: out[b, k] = sum_j m[k, j] * p[b, j]."""
    _require(m.data.ndim == 2 and p.data.ndim == 2, "matvec_rows: expects matrices")
    _require(m.shape[1] == p.shape[1], f"matvec_rows: M {m.shape} vs p {p.shape}")

    def backward(g):
        return g.T @ p.data, g @ m.data

    return _out(p.data @ m.data.T, (m, p), backward)


def row_l2_normalize(m: Tensor) -> Tensor:
    """Divide each row by its L2 norm; all-zero rows pass through with zero gradient."""
    _require(m.data.ndim == 2, "row_l2_normalize: expects a matrix")
    norms = np.sqrt(np.sum(m.data * m.data, axis=1, keepdims=True))
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1.0)
    y = np.where(nonzero, m.data / safe, 0.0)

    def backward(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return (np.where(nonzero, (g - y * dot) / safe, 0.0),)

    return _out(y, (m,), backward)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, n: int) -> "RunningStats":
        return cls(np.zeros(n), np.ones(n))


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, train: bool) -> Tensor:
    """Per-feature batch normalization for x of shape (B, n).

    Train mode normalizes with the biased batch variance and moves the
    running statistics toward the batch mean and unbiased variance.
    Eval mode uses the running statistics and is a fixed affine map.
    """
    _require(x.data.ndim == 2, "batchnorm1d: expects (B, n)")
    n = x.shape[1]
    _require(gamma.shape == (n,) and beta.shape == (n,), "batchnorm1d: gamma/beta width")
    if train:
        bsz = x.shape[0]
        if bsz < 2:
            raise DegenerateBatch(f"batchnorm1d needs at least 2 rows in train mode, got {bsz}")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        m = state.momentum
        state.mean = (1.0 - m) * state.mean + m * mu
        state.var = (1.0 - m) * state.var + m * var * bsz / (bsz - 1)

        def backward(g):
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        inv = 1.0 / np.sqrt(state.var + BN_EPS)
        xhat = (x.data - state.mean) * inv

        def backward(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _out(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Softmax family and losses
# ---------------------------------------------------------------------------


def softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))


def softmax(z: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    s = softmax_np(z.data)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _out(s, (z,), backward)


def log_softmax(z: Tensor) -> Tensor:
    ls = log_softmax_np(z.data)

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _out(ls, (z,), backward)


def soft_cross_entropy(targets, logits: Tensor, validate: bool = True) -> Tensor:
    """Batch mean of -sum_c t_c * log_softmax(z)_c.

    ``targets`` may itself be a graph tensor (smoothed labels); the gradient
    then flows into both arguments.
    """
    targets = as_tensor(targets)
    _require(targets.shape == logits.shape and logits.data.ndim == 2,
             f"soft_cross_entropy: {targets.shape} vs {logits.shape}")
    t = targets.data
    if validate:
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
            raise InvalidTarget("target rows must be non-negative and sum to 1")
    bsz = logits.shape[0]
    ls = log_softmax_np(logits.data)
    loss = -np.sum(t * ls) / bsz

    def backward(g):
        g = float(g)
        dz = (np.exp(ls) * t.sum(axis=1, keepdims=True) - t) * (g / bsz)
        dt = -ls * (g / bsz)
        return dt, dz

    return _out(np.asarray(loss), (targets, logits), backward)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    errors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=lambda k: float(self.errors[k].max(initial=0.0)))
        return name, float(self.errors[name].max(initial=0.0))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    # floor keeps structurally-zero gradients from amplifying FD round-off
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Parameter] | Sequence[Parameter],
    tol: float = 1e-4,
    step: float = FD_STEP,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare backward gradients of scalar ``fn()`` against central differences.

    ``fn`` is called once for the analytic pass and twice per coordinate.
    It must be deterministic given the parameter values.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    for k, g in analytic.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"analytic gradient of {k} is not finite")

    errors: dict[str, np.ndarray] = {}
    worst = 0.0
    for k, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        if not np.all(np.isfinite(numeric)):
            raise NonFiniteError(f"numeric gradient of {k} is not finite")
        err = relative_error(analytic[k].reshape(-1), numeric, floor).reshape(p.shape)
        errors[k] = err
        if err.size:
            worst = max(worst, float(err.max()))
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(worst, tol, errors)
