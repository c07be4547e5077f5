"""Minimal reverse-mode automatic differentiation on 2-D float64 tensors.

Everything is a (rows, cols) matrix; scalars are 1x1. Operations record
onto the innermost active ``Tape`` (define-by-run, rebuilt every
iteration) and ``Tape.backward`` replays the record in reverse to
accumulate vector-Jacobian products into ``Tensor.grad``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """A 2-D float64 array plus gradient bookkeeping.

    ``grad`` is ``None`` until a backward pass deposits something;
    repeated backward passes without ``zero_grad`` accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        if arr.size == 0:
            raise ShapeError(f"zero-size tensor with shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# A record is (output, inputs, vjp) where vjp maps the output adjoint to
# one adjoint per input (None for inputs that do not need one).
_Record = tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], tuple]]

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for one backward pass."""

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into ``grad`` of every recorded
        tensor that requires gradients. ``loss`` must be 1x1."""
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got {loss.data.shape}")
        # Adjoints for THIS pass live in a local map so earlier passes
        # (accumulated in .grad) never feed back into the sweep.
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        touched: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self._records):
            g = adjoint.get(id(out))
            if g is None:
                continue
            contribs = vjp(g)
            for inp, contrib in zip(inputs, contribs):
                if contrib is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + contrib
                else:
                    adjoint[key] = contrib
                touched[key] = inp
        for key, t in touched.items():
            if not t.requires_grad:
                continue
            g = adjoint[key]
            t.grad = g.copy() if t.grad is None else t.grad + g


def _current_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _current_tape()
    if tape is not None and out.requires_grad:
        tape._records.append((out, inputs, vjp))
    return out


def constant(data) -> Tensor:
    """Tensor that never receives gradients (stop-gradient wrapper)."""
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: {a.data.shape} vs {b.data.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def vjp(g):
        return g * b.data, g * a.data

    return _make(out, (a, b), vjp)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Broadcast a 1xC bias row across the rows of an NxC tensor."""
    if bias.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"add_bias: {x.data.shape} with bias {bias.data.shape}")
    out = x.data + bias.data

    def vjp(g):
        return g, g.sum(axis=0, keepdims=True)

    return _make(out, (x, bias), vjp)


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def relu(x: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids exp overflow for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: {a.data.shape} vs {b.data.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def vjp(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of {x.data.shape}")
    out = x.data[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(out, (x,), vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Column means as a 1xC row.

    Values are summed in per-column sorted order so the result is
    bit-identical under any row permutation of the input.
    """
    n = x.data.shape[0]
    out = np.sum(np.sort(x.data, axis=0), axis=0, keepdims=True) / n
    return _make(out, (x,), lambda g: (np.repeat(g / n, n, axis=0),))


def sum_all(x: Tensor) -> Tensor:
    out = np.array([[x.data.sum()]])
    return _make(out, (x,), lambda g: (np.full_like(x.data, g[0, 0]),))


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), vjp)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of x by scalar w[i, 0]."""
    if w.data.shape != (x.data.shape[0], 1):
        raise ShapeError(f"scale_rows: {x.data.shape} with weights {w.data.shape}")
    out = x.data * w.data

    def vjp(g):
        return g * w.data, (g * x.data).sum(axis=1, keepdims=True)

    return _make(out, (x, w), vjp)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    y = np.asarray(labels)
    n, c = logits.data.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} for logits {logits.data.shape}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logsm = z - logsumexp
    out = np.array([[-logsm[np.arange(n), y].mean()]])
    sm = np.exp(logsm)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    def vjp(g):
        return (g[0, 0] * (sm - onehot) / n,)

    return _make(out, (logits,), vjp)


def softmax_over_set(scores: Sequence[Tensor]) -> list[Tensor]:
    """Softmax over a list of 1x1 scores, returned as 1x1 tensors."""
    if not scores:
        raise ShapeError("softmax_over_set needs at least one score")
    for s in scores:
        if s.data.shape != (1, 1):
            raise ShapeError(f"softmax_over_set expects 1x1 scores, got {s.data.shape}")
    row = scores[0]
    for s in scores[1:]:
        row = concat_cols(row, s)
    sm = softmax_rows(row)
    return [slice_cols(sm, j, j + 1) for j in range(len(scores))]


# ---------------------------------------------------------------------------
# optimization


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> None:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale


class Adam:
    """Adam with bias correction over a fixed ordered parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} grads for {len(self.params)} params")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} for param {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def gather_grads(params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients aligned with ``params``; unreached parameters get zeros."""
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
            for p in params]
