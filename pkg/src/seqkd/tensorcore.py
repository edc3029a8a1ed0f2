"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations a post-LN transformer encoder needs are
provided. Operations record themselves on the innermost active
:class:`GradTape` (one stack per thread); outside a tape they run as plain
numpy code, which is what inference uses.

Random numbers come from :func:`make_rng`: a numpy ``Generator`` driven by
the Philox-4x64 counter-based bit generator, keyed through
``SeedSequence([seed, *path])``. Independent streams are obtained by
extending the path (for example ``make_rng(seed, epoch, user)``), so every
consumer owns a reproducible stream regardless of call order.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, ParameterError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "make_rng",
    "backward",
    "no_grad",
    "add",
    "scale",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "relu",
    "embedding_gather",
    "dropout",
    "transpose_last_two",
    "concat_last_axis",
    "reshape",
    "permute",
    "tensor_sum",
    "cross_entropy_masked",
    "soft_cross_entropy",
]

DTYPE = np.float64
_GELU_C = math.sqrt(2.0 / math.pi)


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Return an independent Philox stream for ``(seed, *path)``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class Tensor:
    """A float64 array plus a flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Gradients:
    """Map from tensor to accumulated gradient.

    Looking up a tensor that never received a gradient yields zeros of the
    tensor's shape.
    """

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def accumulate(self, t: Tensor, g: np.ndarray) -> None:
        # never in place: g may alias arrays saved by other nodes
        entry = self._grads.get(id(t))
        if entry is None:
            self._grads[id(t)] = (t, g)
        else:
            self._grads[id(t)] = (t, entry[1] + g)

    def pop(self, t: Tensor):
        entry = self._grads.pop(id(t), None)
        return None if entry is None else entry[1]

    def __getitem__(self, t: Tensor) -> np.ndarray:
        entry = self._grads.get(id(t))
        if entry is None:
            return np.zeros(t.shape, dtype=DTYPE)
        return entry[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def for_params(self, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self[t] for name, t in params.items()}


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are recorded in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), fn))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> Gradients:
        return backward(loss, self)


class no_grad:
    """Suspend recording inside the block (nested tapes resume afterwards)."""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    """Run the reverse pass for scalar ``loss`` over ``tape``."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    grads.accumulate(loss, np.ones(loss.shape, dtype=DTYPE))
    for node in reversed(tape.nodes):
        g = grads.pop(node.out)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is not None and t.requires_grad:
                grads.accumulate(t, ig)
    return grads


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap an op result and record it if any input needs a gradient."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for biases and masks)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), fn)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix shared across every leading index of ``a``
    (the projection case) or carry the same leading axes as ``a`` (the
    attention case).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} and {b.shape}")
    if b.ndim == 2:
        # one GEMM over all leading rows instead of a loop of small ones
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def fn(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
    else:
        out = np.matmul(a.data, b.data)

        def fn(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
            return ga, gb

    return _emit(out, (a, b), fn)


def transpose_last_two(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat_last_axis(parts: Sequence) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat_last_axis: leading shapes differ {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def fn(g):
        return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit(out, parts, fn)


def gelu(a) -> Tensor:
    """GELU in BERT's tanh form: ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``.

    ``tanh`` is evaluated through ``exp`` (``1 + tanh(u) = 2 / (1 + e^{-2u})``),
    which is several times faster than ``np.tanh`` on large arrays.
    """
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = x2 * (-2.0 * _GELU_C * 0.044715)
    t -= 2.0 * _GELU_C
    t *= x  # t = -2u
    with np.errstate(over="ignore"):
        np.exp(t, out=t)
    t += 1.0
    s = np.reciprocal(t, out=t)  # = (1 + tanh u) / 2
    out = x * s

    def fn(g):
        # d/dx [x s(u)] = s + 2 x s (1 - s) u'(x)
        du = x2 * (3 * 0.044715 * _GELU_C)
        du += _GELU_C
        du *= x
        du *= 2.0
        du *= s
        du *= 1.0 - s
        du += s
        du *= g
        return (du,)

    return _emit(out, (a,), fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def embedding_gather(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(np.flatnonzero((ids.ravel() < 0) | (ids.ravel() >= table.shape[0]))[0])
        raise DataError(
            f"embedding_gather: id {int(ids.ravel()[bad])} at flat position {bad} "
            f"outside [0, {table.shape[0]})"
        )
    out = table.data[ids]

    def fn(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, ids.ravel(), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _emit(out, (table,), fn)


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout. Identity when ``train`` is false or ``rate`` is 0."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# normalisation and softmax
# ---------------------------------------------------------------------------


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0.0 or not math.isfinite(temperature):
        raise ParameterError(f"temperature must be positive and finite, got {temperature}")
    return temperature


def _softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_rows(a, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``a / temperature`` (max-subtracted)."""
    temperature = _check_temperature(temperature)
    a = _as_tensor(a)
    y = _softmax(a.data, temperature)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / temperature,)

    return _emit(y, (a,), fn)


def layer_norm(a, gamma, beta, eps: float = 1e-12) -> Tensor:
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: last axis {d} vs gamma {gamma.shape} / beta {beta.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx = None
        if a.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        flat_g = g.reshape(-1, d)
        ggamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta

    return _emit(out, (a, gamma, beta), fn)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_masked(logits, labels, ignore_label: int = -1) -> tuple[Tensor, int]:
    """Mean negative log-likelihood over positions whose label is not ignored.

    Returns ``(loss, count)``; when every position is ignored the loss is 0.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    vocab = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_masked: logits {logits.shape} vs labels {labels.shape}")
    flat_labels = labels.reshape(-1)
    valid = flat_labels != ignore_label
    bad = valid & ((flat_labels < 0) | (flat_labels >= vocab))
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"cross_entropy_masked: label {int(flat_labels[pos])} at flat position {pos} "
            f"outside [0, {vocab})"
        )
    rows = np.flatnonzero(valid)
    count = int(rows.size)
    if count == 0:
        return _emit(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),)), 0
    flat = logits.data.reshape(-1, vocab)
    picked = flat[rows]
    targets = flat_labels[rows]
    logp = _log_softmax(picked)
    loss = -logp[np.arange(count), targets].sum() / count

    def fn(g):
        d = np.exp(logp)
        d[np.arange(count), targets] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = d * (g / count)
        return (full.reshape(logits.shape),)

    return _emit(np.asarray(loss), (logits,), fn), count


def soft_cross_entropy(student_logits, teacher_probs: np.ndarray, temperature: float) -> Tensor:
    """Mean over rows of ``-sum_i p_i log softmax(z / T)_i``.

    ``teacher_probs`` is a constant target distribution per row; no gradient
    is propagated into it.
    """
    temperature = _check_temperature(temperature)
    student_logits = _as_tensor(student_logits)
    p = np.asarray(teacher_probs, dtype=DTYPE)
    if p.shape != student_logits.shape:
        raise ShapeError(
            f"soft_cross_entropy: student {student_logits.shape} vs teacher {p.shape}"
        )
    vocab = p.shape[-1]
    flat_z = student_logits.data.reshape(-1, vocab)
    flat_p = p.reshape(-1, vocab)
    rows = flat_z.shape[0]
    if rows == 0:
        raise ContractError("soft_cross_entropy: no positions")
    logq = _log_softmax(flat_z, temperature)
    loss = -(flat_p * logq).sum() / rows

    def fn(g):
        d = (np.exp(logq) - flat_p) * (g / (rows * temperature))
        return (d.reshape(student_logits.shape),)

    return _emit(np.asarray(loss), (student_logits,), fn)


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) over the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=DTYPE)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
