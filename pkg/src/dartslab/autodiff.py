"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` is entered as a context manager; every primitive applied to
a tensor that requires gradients while the tape is active is appended to it.
``tape.backward(loss)`` walks the nodes once in reverse insertion order and
returns adjoints keyed by tensor.

Only scalar-to-tensor broadcasting is supported. Everything else must have
matching shapes, otherwise a :class:`ShapeError` naming both shapes is raised.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs, backward, op: str) -> Tensor:
        output.requires_grad = True
        output.node_id = len(self.nodes)
        self.nodes.append(Node(output, tuple(inputs), backward, op))
        return output

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> "Gradients":
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError(f"non-finite loss value {loss.data!r}")
        grads = Gradients()
        grads.accumulate(loss, np.asarray(seed, dtype=DTYPE))
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is not None and inp.requires_grad:
                    grads.accumulate(inp, gi)
        for t, g in grads.items():
            if not np.isfinite(g.sum()):
                raise NonFiniteError(f"non-finite gradient reached {t!r}")
        return grads


class Gradients:
    """Adjoint store keyed by tensor identity (keeps tensors alive)."""

    def __init__(self):
        self._store: dict[int, tuple[Tensor, np.ndarray]] = {}

    def accumulate(self, t: Tensor, g: np.ndarray) -> None:
        if g.shape != t.shape:
            raise ShapeError(f"adjoint shape {g.shape} does not match tensor shape {t.shape}")
        key = id(t)
        if key in self._store:
            self._store[key] = (t, self._store[key][1] + g)
        else:
            # stored without copying; adjoints are never updated in place
            self._store[key] = (t, g)

    def get(self, t: Tensor) -> np.ndarray | None:
        hit = self._store.get(id(t))
        return None if hit is None else hit[1]

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store

    def items(self):
        return list(self._store.values())


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == DTYPE else np.asarray(data, DTYPE)
    out.requires_grad = False
    out.node_id = None
    out.name = None
    return out


def _emit(data: np.ndarray, inputs, backward, op: str) -> Tensor:
    out = _wrap(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward, op)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if _is_scalar(t) and g.ndim else g


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        "sub",
    )


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _emit(e, (x,), lambda g: (g * e,), "exp")


# -- shape / reductions -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def total(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full inner product <a, b> of two same-shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} do not conform")
    return _emit(
        np.asarray(np.sum(a.data * b.data)),
        (a, b),
        lambda g: (g * b.data, g * a.data),
        "dot",
    )


def take_row(x: Tensor, i: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= i < x.shape[0]:
        raise ShapeError(f"take_row: row {i} out of range for shape {x.shape}")

    def back(g):
        full = np.zeros_like(x.data)
        full[i] = g
        return (full,)

    return _emit(x.data[i].copy(), (x,), back, "take_row")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def back(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _emit(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """Row-batched ``x @ weight.T`` for ``x`` of shape (batch, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} and weight {weight.shape} do not conform")
    return _emit(
        x.data @ weight.data.T,
        (x, weight),
        lambda g: (g @ weight.data, g.T @ x.data),
        "linear",
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Adds a (features,) bias to every row of a (batch, features) tensor."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: input {x.shape} and bias {bias.shape} do not conform")
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def window_matrix(width: int, radius: int) -> np.ndarray:
    """Row i averages features within ``radius`` of i (edges clamp, not padded)."""
    idx = np.arange(width)
    m = (np.abs(idx[:, None] - idx[None, :]) <= radius).astype(DTYPE)
    return m / m.sum(axis=1, keepdims=True)


def window_mean(x: Tensor, radius: int = 1) -> Tensor:
    """Mean over a sliding feature window; the pooling analog."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"window_mean: expected 1-D or 2-D input, got {x.shape}")
    m = window_matrix(x.shape[-1], radius)
    return _emit(x.data @ m.T, (x,), lambda g: (g @ m,), "window_mean")


# -- normalisation and mixing -------------------------------------------------


def standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature batch standardisation (batch norm without affine terms)."""
    if x.data.ndim != 2:
        raise ShapeError(f"standardize: expected (batch, features), got {x.shape}")
    scale = 1.0 / x.shape[0]
    xc = x.data - x.data.sum(axis=0) * scale
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=0) * scale + eps)
    xhat = xc * inv

    def back(g):
        gm = g.sum(axis=0) * scale
        gxm = (g * xhat).sum(axis=0) * scale
        return (inv * (g - gm - xhat * gxm),)

    return _emit(xhat, (x,), back, "standardize")


def mix(probs: Tensor, row: int, outputs: Sequence[Tensor]) -> Tensor:
    """``sum_k probs[row, k] * outputs[k]``; probs may be a vector (row ignored)."""
    p = probs.data if probs.data.ndim == 1 else probs.data[row]
    if len(outputs) != p.shape[0]:
        raise ShapeError(f"mix: {len(outputs)} outputs for {p.shape[0]} weights")
    shape = outputs[0].shape
    for o in outputs:
        if o.shape != shape:
            raise ShapeError(f"mix: output shapes {shape} and {o.shape} do not conform")
    out = np.zeros(shape, dtype=DTYPE)
    for pk, o in zip(p, outputs):
        out += pk * o.data

    def back(g):
        gp_row = np.array([np.sum(g * o.data) for o in outputs])
        if probs.data.ndim == 1:
            gp = gp_row
        else:
            gp = np.zeros_like(probs.data)
            gp[row] = gp_row
        return (gp, *[pk * g for pk in p])

    return _emit(out, (probs, *outputs), back, "mix")


# -- softmax family -----------------------------------------------------------


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    if z.size == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    s = _softmax_np(z.data)

    def back(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _emit(s, (z,), back, "softmax")


def _check_one_hot(target: np.ndarray) -> None:
    ok = np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=-1) == 1)
    if not ok:
        raise ValueError("cross_entropy target must be one-hot")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-y^T log softmax(logits)`` over rows; target is one-hot."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {y.shape}")
    _check_one_hot(y)
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logsm = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = 1 if z.ndim == 1 else z.shape[0]
    loss = -np.sum(y * logsm) / rows
    sm = np.exp(logsm)
    return _emit(np.asarray(loss), (logits,), lambda g: (g * (sm - y) / rows,), "cross_entropy")


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (classes,), dtype=DTYPE)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# -- finite differences -------------------------------------------------------


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise then maximised."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@dataclass
class GradCheck:
    max_rel_error: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def ok(self, rtol: float) -> bool:
        return self.max_rel_error <= rtol


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheck:
    """Compare tape adjoints of ``loss_fn()`` with central differences.

    ``floor`` guards the relative error against entries whose true gradient
    is ~0 (they are compared absolutely below the floor).
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    analytic = [grads[p].copy() for p in params]
    numeric = []
    for p in params:
        numeric.append(numeric_grad(lambda: loss_fn().item(), p.data, step))
    err = max((rel_error(a, n, floor) for a, n in zip(analytic, numeric)), default=0.0)
    return GradCheck(err, analytic, numeric)
