"""Dense float64 helpers and a small reverse-mode tape.

Matrices are plain ``numpy`` float64 arrays. The :class:`Tape` records the
primitive operations used by the multi-exit network (affine maps,
elementwise nonlinearities, concatenation, softmax/sigmoid losses) and
replays them backwards to accumulate gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, NumericalError

BCE_CLAMP = 1e-7


def matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a finite 2-D float64 array, optionally checking its shape."""
    arr = np.array(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise InvalidInputError(f"expected {rows}x{cols} entries, got {arr.size}")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise InvalidInputError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("matrix entries must be finite")
    arr.flags.writeable = False
    return arr


def _vector(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_rows(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax along ``axis`` without input validation."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits) -> np.ndarray:
    z = _vector(logits, "logits")
    return softmax_rows(z)


def predictive_entropy(probs) -> float:
    """Shannon entropy in nats; ``0 * log 0`` counts as 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError("probs must be a non-empty vector")
    if np.any(p < 0):
        raise InvalidInputError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise InvalidInputError(f"probabilities sum to {p.sum()}, expected 1")
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise entropy of a batch of probability vectors."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def cross_entropy_loss(logits, label: int) -> float:
    z = _vector(logits, "logits")
    if not 0 <= int(label) < z.size or int(label) != label:
        raise InvalidInputError(f"label {label} out of range for K={z.size}")
    return float(-log_softmax(z)[int(label)])


def binary_cross_entropy(p: float, y) -> float:
    if y not in (0, 1):
        raise InvalidInputError(f"binary target must be 0 or 1, got {y!r}")
    if not math.isfinite(p):
        raise InvalidInputError("probability must be finite")
    p = min(max(float(p), BCE_CLAMP), 1.0 - BCE_CLAMP)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def gradient_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    epsilon: float = 1e-4,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(theta)`` returns ``(loss, grad)``. Only the loss is used at the
    perturbed points. ``indices`` restricts the check to a subset of
    coordinates.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise InvalidInputError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    theta = np.array(params, dtype=np.float64)
    loss, analytic = loss_fn(theta.copy())
    if not math.isfinite(loss):
        raise NumericalError("loss is non-finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    idx = range(theta.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        saved = theta[i]
        theta[i] = saved + epsilon
        up = loss_fn(theta.copy())[0]
        theta[i] = saved - epsilon
        down = loss_fn(theta.copy())[0]
        theta[i] = saved
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericalError(f"non-finite loss when perturbing parameter {i}")
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst


class Var:
    """A value on a tape. Leaves may point their gradient at an external buffer."""

    __slots__ = ("value", "grad", "tape", "requires_grad", "_buffer")

    def __init__(self, value, tape: "Tape", requires_grad: bool, buffer=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self._buffer = buffer

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self._buffer is not None:
            self._buffer += g
        elif self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.add(self, other)
        if other == 0:
            return self
        return self.tape.add(self, self.tape.constant(np.asarray(other, dtype=np.float64)))

    __radd__ = __add__

    def __mul__(self, c):
        return self.tape.scale(self, float(c))

    __rmul__ = __mul__

    def __float__(self):
        return float(self.value)


class Tape:
    """Single-writer record of primitive ops for one forward/backward pair.

    With ``enabled=False`` the ops still compute values but record nothing,
    which is how inference runs.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._nodes: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def __len__(self):
        return len(self._nodes)

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self, False)

    def param(self, value: np.ndarray, grad_buffer: np.ndarray | None = None) -> Var:
        return Var(value, self, self.enabled, grad_buffer)

    def _record(self, value, parents: tuple[Var, ...], backward) -> Var:
        needs = self.enabled and any(p.requires_grad for p in parents)
        out = Var(value, self, needs)
        if needs:
            self._nodes.append((out, parents, backward))
        return out

    def backward(self, root: Var, seed: float = 1.0):
        """Propagate ``d root`` back through every recorded node once."""
        if np.size(root.value) != 1:
            raise InvalidInputError("backward requires a scalar root")
        root.accumulate(np.full(np.shape(root.value), seed, dtype=np.float64))
        for out, parents, fn in reversed(self._nodes):
            if out.grad is None:
                continue
            fn(out.grad, *parents)
        self._nodes.clear()

    # primitive ops

    def matmul(self, a: Var, b: Var) -> Var:
        def back(g, a, b):
            if a.requires_grad:
                a.accumulate(g @ b.value.T)
            if b.requires_grad:
                b.accumulate(a.value.T @ g)

        return self._record(a.value @ b.value, (a, b), back)

    def add(self, a: Var, b: Var) -> Var:
        """Elementwise sum; a 1-D ``b`` broadcasts over the rows of ``a``."""

        def back(g, a, b):
            a.accumulate(_unbroadcast(g, a.shape))
            b.accumulate(_unbroadcast(g, b.shape))

        return self._record(a.value + b.value, (a, b), back)

    def affine(self, x: Var, w: Var, b: Var) -> Var:
        return self.add(self.matmul(x, w), b)

    def scale(self, a: Var, c: float) -> Var:
        def back(g, a):
            a.accumulate(g * c)

        return self._record(a.value * c, (a,), back)

    def tanh(self, a: Var) -> Var:
        y = np.tanh(a.value)

        def back(g, a):
            a.accumulate(g * (1.0 - y * y))

        return self._record(y, (a,), back)

    def relu(self, a: Var) -> Var:
        mask = a.value > 0

        def back(g, a):
            a.accumulate(g * mask)

        return self._record(a.value * mask, (a,), back)

    def activation(self, name: str, a: Var) -> Var:
        if name == "tanh":
            return self.tanh(a)
        if name == "relu":
            return self.relu(a)
        raise InvalidInputError(f"unknown activation {name!r}")

    def concat(self, parts: Sequence[Var]) -> Var:
        widths = [p.shape[1] for p in parts]
        edges = np.cumsum([0] + widths)

        def back(g, *parts):
            for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
                p.accumulate(g[:, lo:hi])

        return self._record(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)

    def softmax_cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        """Mean over rows of ``-log softmax(z)[label]``."""
        z = logits.value
        n = z.shape[0]
        logp = log_softmax(z)
        loss = -logp[np.arange(n), labels].mean()

        def back(g, logits):
            grad = np.exp(logp)
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate(grad * (g / n))

        return self._record(np.float64(loss), (logits,), back)

    def sigmoid_binary_cross_entropy(self, logits: Var, targets: np.ndarray) -> Var:
        """Mean BCE of ``sigmoid(z)`` against 0/1 targets, probabilities clamped."""
        z = logits.value.reshape(-1)
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        n = z.size
        p = sigmoid(z)
        pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
        loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
        inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)

        def back(g, logits):
            grad = np.where(inside, p - y, 0.0) * (g / n)
            logits.accumulate(grad.reshape(logits.shape))

        return self._record(np.float64(loss), (logits,), back)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g
