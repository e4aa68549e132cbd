"""Minimal dense reverse-mode automatic differentiation on numpy arrays.

Operations are only recorded while a :class:`Tape` is active::

    params = ParameterSet({"w": rng.normal(size=(3, 2))})
    with Tape() as tape:
        loss = masked_sum(relu(matmul(Tensor(x), params["w"])))
    tape.backward(loss)
    params["w"].grad

Outside a tape every primitive is a plain numpy computation, which is what
inference uses.
"""

from __future__ import annotations

import contextvars
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-7
STD_EPS = 1e-10

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class DimensionError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives execute, so inputs always precede the
    nodes that consume them; :meth:`backward` walks the record once in
    reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that
        requires gradients."""
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        produced = {id(node.out) for node in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            partials = node.backward(g)
            for inp, part in zip(node.inputs, partials):
                if part is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + part
                    else:
                        grads[key] = part
                else:
                    inp.grad += part
        # loss may itself be a leaf (e.g. a parameter used directly)
        if id(loss) not in produced and loss.requires_grad and id(loss) in grads:
            loss.grad += grads[id(loss)]


def primitive(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as a tensor, recording ``backward`` when a tape is
    active and any input requires gradients.

    ``backward(g)`` returns one partial (or ``None``) per input.
    """
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    if needs:
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise DimensionError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# --- primitives --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.data.ndim == 2 and b.data.ndim == 2, "matmul", a.shape, b.shape)
    bm = b.data.T if transpose_b else b.data
    _check(a.shape[1] == bm.shape[0], "matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g):
        ga = g @ (B if transpose_b else B.T) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        return ga, (g.T @ A if transpose_b else A.T @ g)

    return primitive(A @ bm, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row."""
    a, b = as_tensor(a), as_tensor(b)
    bias = b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]
    _check(a.shape == b.shape or bias, "add", a.shape, b.shape)

    def backward(g):
        return g, (g.sum(axis=0) if bias else g)

    return primitive(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return primitive(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return primitive(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor, floor: float = PROB_FLOOR) -> Tensor:
    """Logistic function clamped to ``[floor, 1 - floor]``."""
    a = as_tensor(a)
    x = a.data
    raw = np.empty_like(x)
    pos = x >= 0
    raw[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    raw[~pos] = ex / (1.0 + ex)
    out = np.clip(raw, floor, 1.0 - floor)
    inside = (raw > floor) & (raw < 1.0 - floor)
    return primitive(out, (a,), lambda g: (g * raw * (1.0 - raw) * inside,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of non-positive value")
    x = a.data
    return primitive(np.log(x), (a,), lambda g: (g / x,))


def softmax(a: Tensor) -> Tensor:
    """Row-wise exp-normalise of a 2-D tensor."""
    a = as_tensor(a)
    _check(a.data.ndim == 2, "softmax", a.shape)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return primitive(p, (a,), backward)


def _grouped(a: Tensor, groups: int, op: str) -> np.ndarray:
    _check(a.data.ndim == 2 and groups >= 1 and a.shape[0] % groups == 0 and a.shape[0] > 0,
           op, a.shape, f"groups={groups}")
    return a.data.reshape(groups, a.shape[0] // groups, a.shape[1])


def mean_time(a: Tensor, groups: int = 1) -> Tensor:
    """Mean over rows. With ``groups=G`` the (G*T) x D input is treated as G
    consecutive sequences of length T and the result is G x D; with G=1 the
    result is a D-vector."""
    a = as_tensor(a)
    x = _grouped(a, groups, "mean_time")
    T = x.shape[1]
    out = x.mean(axis=1)

    def backward(g):
        g = g.reshape(groups, 1, -1)
        return (np.broadcast_to(g / T, x.shape).reshape(a.shape),)

    return primitive(out if groups > 1 else out[0], (a,), backward)


def std_time(a: Tensor, groups: int = 1, eps: float = STD_EPS) -> Tensor:
    """Population standard deviation over rows, ``sqrt(var + eps)``."""
    a = as_tensor(a)
    x = _grouped(a, groups, "std_time")
    T = x.shape[1]
    centred = x - x.mean(axis=1, keepdims=True)
    std = np.sqrt((centred**2).mean(axis=1) + eps)

    def backward(g):
        g = g.reshape(groups, 1, -1)
        return ((g * centred / (T * std[:, None, :])).reshape(a.shape),)

    return primitive(std if groups > 1 else std[0], (a,), backward)


def length_normalize(a: Tensor) -> Tensor:
    """Scale every row (or a single vector) to unit Euclidean norm."""
    a = as_tensor(a)
    x = a.data if a.data.ndim == 2 else a.data[None, :]
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericalError("length_normalize: zero-norm row")
    u = x / norms

    def backward(g):
        g2 = g if a.data.ndim == 2 else g[None, :]
        gx = (g2 - u * (g2 * u).sum(axis=1, keepdims=True)) / norms
        return (gx if a.data.ndim == 2 else gx[0],)

    return primitive(u if a.data.ndim == 2 else u[0], (a,), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors:
        _check(
            t.data.ndim == ndim
            and all(t.shape[d] == tensors[0].shape[d] for d in range(ndim) if d != ax),
            "concatenate",
            *(t.shape for t in tensors),
        )
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return primitive(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def frame_stack_indices(T: int, context: int, stride: int, offset: int | None = None) -> np.ndarray:
    """Row indices (T' x (2*context+1)) gathered by :func:`frame_stack`;
    out-of-range positions repeat the first/last frame."""
    if offset is None:
        offset = stride // 2 - 1 if stride > 1 else 0
    n_out = T // stride
    centres = stride * np.arange(n_out) + offset
    idx = centres[:, None] + np.arange(-context, context + 1)[None, :]
    return np.clip(idx, 0, max(T - 1, 0))


def frame_stack(a: Tensor, context: int, stride: int, offset: int | None = None) -> Tensor:
    """Concatenate +-``context`` neighbouring rows around every ``stride``-th
    row: T x D -> floor(T/stride) x ((2*context+1)*D)."""
    a = as_tensor(a)
    _check(a.data.ndim == 2 and stride >= 1 and context >= 0, "frame_stack", a.shape)
    T, D = a.shape
    idx = frame_stack_indices(T, context, stride, offset)
    out = a.data[idx].reshape(len(idx), -1)

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx.ravel(), g.reshape(-1, D))
        return (gx,)

    return primitive(out, (a,), backward)


def masked_sum(a: Tensor, mask=None) -> Tensor:
    """Scalar sum of ``a * mask`` (plain sum when ``mask`` is None)."""
    a = as_tensor(a)
    m = np.ones_like(a.data) if mask is None else np.asarray(mask, dtype=np.float64)
    _check(m.shape == a.shape, "masked_sum", a.shape, m.shape)
    return primitive(np.asarray((a.data * m).sum()), (a,), lambda g: (g * m,))


# --- parameters and gradient checking ----------------------------------------


class ParameterSet(OrderedDict):
    """Named trainable tensors with gradient accumulators."""

    def __init__(self, arrays=None):
        super().__init__()
        for name, value in (arrays or {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        value.name = name
        if value.grad is None or value.grad.shape != value.data.shape:
            value.grad = np.zeros_like(value.data)
        super().__setitem__(name, value)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad[...] = 0.0

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad.copy() for k, t in self.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.arrays())

    def subset(self, names: Iterable[str]) -> "ParameterSet":
        out = ParameterSet()
        for n in names:
            OrderedDict.__setitem__(out, n, self[n])
        return out


def backpropagate(loss_fn: Callable[[], Tensor], params: ParameterSet) -> Tensor:
    """Zero gradients, evaluate ``loss_fn`` on a fresh tape and back-propagate.
    Parameters that do not reach the loss keep an exactly zero gradient."""
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return loss


def grad_check(fn: Callable[[ParameterSet], Tensor], params: ParameterSet, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| /
    max(1, |analytic|, |central difference|)."""
    if not 0 < epsilon <= 1e-3:
        raise ValueError("epsilon must be in (0, 1e-3]")
    loss = backpropagate(lambda: fn(params), params)
    if not np.isfinite(loss.data):
        raise NumericalError("function value is not finite")
    worst = 0.0
    for t in params.values():
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1).copy()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn(params).item()
            flat[i] = orig - epsilon
            down = fn(params).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError("function value is not finite")
            numeric = (up - down) / (2 * epsilon)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, err)
    return worst
