"""A small tape-based reverse-mode autodiff engine over numpy arrays.

Operations build ``Tensor`` nodes. While a ``Tape`` is active, every node that
depends on a gradient-requiring input is appended to it in creation order, so
the reverse pass is a plain reversed walk of the tape and ``Tape.replay``
re-executes the recorded forward closures in order.

Outside a tape nothing is recorded and the ops are thin numpy wrappers.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_forward", "_op", "_kink")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._forward: Callable[[], None] | None = None
        self._op = "leaf"
        self._kink: Callable[[], np.ndarray] | None = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations for one forward pass.

    ``watch`` registers named leaves whose gradients ``gradients`` returns.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.watched: dict[str, Tensor] = {}
        self.output: Tensor | None = None
        self.frozen: dict[str, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, name: str, value) -> Tensor:
        t = Tensor(value.data if isinstance(value, Tensor) else value, requires_grad=True, name=name)
        self.watched[name] = t
        return t

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor | None = None, seed: np.ndarray | float = 1.0) -> None:
        out = output if output is not None else self.output
        if out is None:
            raise ValueError("tape has no output to differentiate")
        for node in self.nodes:
            node.grad = None
        for leaf in self.watched.values():
            leaf.grad = None
        out.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), out.shape).copy()
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward()

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.watched.items()
        }

    def replay(self) -> np.ndarray:
        """Re-run every recorded forward closure and return the output value."""
        for node in self.nodes:
            node._forward()
        target = self.output if self.output is not None else self.nodes[-1]
        return target.data

    def kink_signature(self) -> tuple[bytes, ...]:
        """Active-set masks of every piecewise op (relu, clip, minimum) on the tape."""
        return tuple(np.packbits(n._kink()).tobytes() for n in self.nodes if n._kink is not None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    # never updated in place, so one upstream buffer may be shared by several parents
    t.grad = np.asarray(g, dtype=np.float64) if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str) -> tuple[Tensor, Tape | None]:
    out = Tensor(data)
    out._op = op
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        return out, tape
    return out, None


def _finish(out: Tensor, tape: Tape | None, backward, forward, kink=None) -> Tensor:
    if tape is not None:
        out._backward = backward
        out._forward = forward
        out._kink = kink
        tape.record(out)
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _node(a.data + b.data, (a, b), "add")

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    def forward():
        out.data = a.data + b.data

    return _finish(out, tape, backward, forward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _node(a.data - b.data, (a, b), "sub")

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    def forward():
        out.data = a.data - b.data

    return _finish(out, tape, backward, forward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _node(a.data * b.data, (a, b), "mul")

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * b.data)
        if b.requires_grad:
            _accumulate(b, out.grad * a.data)

    def forward():
        out.data = a.data * b.data

    return _finish(out, tape, backward, forward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _node(a.data / b.data, (a, b), "div")

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad / b.data)
        if b.requires_grad:
            _accumulate(b, -out.grad * a.data / (b.data * b.data))

    def forward():
        out.data = a.data / b.data

    return _finish(out, tape, backward, forward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out, tape = _node(a.data**p, (a,), "pow")

    def backward():
        _accumulate(a, out.grad * p * a.data ** (p - 1))

    def forward():
        out.data = a.data**p

    return _finish(out, tape, backward, forward)


def _unary(name: str, f, df) -> Callable[[Tensor], Tensor]:
    """Build an elementwise op; ``df(x, y)`` gives dy/dx from input and output."""

    def op(a) -> Tensor:
        a = as_tensor(a)
        out, tape = _node(f(a.data), (a,), name)

        def backward():
            _accumulate(a, out.grad * df(a.data, out.data))

        def forward():
            out.data = f(a.data)

        return _finish(out, tape, backward, forward)

    op.__name__ = name
    return op


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
sigmoid = _unary("sigmoid", _sigmoid, lambda x, y: y * (1.0 - y))
softplus = _unary("softplus", _softplus, lambda x, y: _sigmoid(x))


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    a = as_tensor(a)
    out, tape = _node(np.maximum(a.data, 0.0), (a,), "relu")

    def backward():
        _accumulate(a, out.grad * (a.data > 0))

    def forward():
        out.data = np.maximum(a.data, 0.0)

    return _finish(out, tape, backward, forward, kink=lambda: a.data > 0)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero wherever the clamp binds."""
    a = as_tensor(a)
    out, tape = _node(np.clip(a.data, lo, hi), (a,), "clip")

    def inside():
        return (a.data > lo) & (a.data < hi)

    def backward():
        _accumulate(a, out.grad * inside())

    def forward():
        out.data = np.clip(a.data, lo, hi)

    return _finish(out, tape, backward, forward, kink=inside)


def minimum(a, c: float) -> Tensor:
    """``min(a, c)``; no gradient flows where the bound binds (a >= c)."""
    a = as_tensor(a)
    out, tape = _node(np.minimum(a.data, c), (a,), "minimum")

    def free():
        return a.data < c

    def backward():
        _accumulate(a, out.grad * free())

    def forward():
        out.data = np.minimum(a.data, c)

    return _finish(out, tape, backward, forward, kink=free)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}

_ACT_FWD = {
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": lambda x: _sigmoid(x),
    "tanh": np.tanh,
}
# derivative written in terms of the activation output h
_ACT_DH = {
    "relu": lambda h: (h > 0).astype(np.float64),
    "sigmoid": lambda h: h * (1.0 - h),
    "tanh": lambda h: 1.0 - h * h,
}


_MLP_CHUNK = 1 << 18


def scalar_mlp(u, w1, b1, w2, b2, activation: str, shared: bool) -> Tensor:
    """Fused bank of scalar MLPs applied to every entry of ``u`` (shape (..., m)).

    shared:   w1, b1 (H,), w2 (H, L), b2 (L,); one 1->H->L net.
    separate: w1, b1, w2 (L, H), b2 (L,); L independent 1->H->1 nets.
    Returns (..., m, L). Same values as composing the elementwise ops, with a
    hand-written backward that avoids the broadcast temporaries.
    """
    u, w1, b1, w2, b2 = (as_tensor(t) for t in (u, w1, b1, w2, b2))
    f, dh = _ACT_FWD[activation], _ACT_DH[activation]
    cache = {}
    recording = current_tape() is not None and any(t.requires_grad for t in (u, w1, b1, w2, b2))

    def rows(flat):
        if shared:
            h = f(flat[:, None] * w1.data + b1.data)  # (N, H)
            return h, h @ w2.data + b2.data
        h = f(flat[:, None, None] * w1.data + b1.data)  # (N, L, H)
        return h, np.einsum("nlh,lh->nl", h, w2.data) + b2.data

    def compute():
        flat = u.data.reshape(-1)
        if recording:
            cache["h"], y = rows(flat)
        else:
            # no backward needed: bound the hidden temporaries to about 2 MB
            step = max(1, _MLP_CHUNK // w1.data.size)
            y = np.concatenate([rows(flat[i : i + step])[1] for i in range(0, len(flat), step)] or [rows(flat)[1]])
        return y.reshape(u.shape + (b2.shape[-1],))

    out, tape = _node(compute(), (u, w1, b1, w2, b2), "scalar_mlp")

    def backward():
        h = cache["h"]
        flat = u.data.reshape(-1)
        gy = out.grad.reshape(len(flat), -1)
        if shared:
            gpre = (gy @ w2.data.T) * dh(h)
            grads = (gpre @ w1.data, flat @ gpre, gpre.sum(0), h.T @ gy, gy.sum(0))
        else:
            gpre = gy[:, :, None] * w2.data * dh(h)
            grads = (
                np.einsum("nlh,lh->n", gpre, w1.data),
                np.einsum("n,nlh->lh", flat, gpre),
                gpre.sum(0),
                np.einsum("nlh,nl->lh", h, gy),
                gy.sum(0),
            )
        for t, g in zip((u, w1, b1, w2, b2), grads):
            if t.requires_grad:
                _accumulate(t, g.reshape(t.shape))

    def forward():
        out.data = compute()

    kink = (lambda: cache["h"] > 0) if activation == "relu" else None
    return _finish(out, tape, backward, forward, kink=kink)


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out, tape = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    def forward():
        out.data = a.data.sum(axis=axis, keepdims=keepdims)

    return _finish(out, tape, backward, forward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out, tape = _node(a.data.reshape(shape), (a,), "reshape")

    def backward():
        _accumulate(a, out.grad.reshape(a.shape))

    def forward():
        out.data = a.data.reshape(shape)

    return _finish(out, tape, backward, forward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out, tape = _node(np.transpose(a.data, axes), (a,), "transpose")

    def backward():
        _accumulate(a, np.transpose(out.grad, inverse))

    def forward():
        out.data = np.transpose(a.data, axes)

    return _finish(out, tape, backward, forward)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = np.expand_dims(a.data, axis).shape
    return reshape(a, shape)


def concat(items: Iterable, axis: int = -1) -> Tensor:
    items = [as_tensor(t) for t in items]
    out, tape = _node(np.concatenate([t.data for t in items], axis=axis), items, "concat")
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]

    def backward():
        for t, g in zip(items, np.split(out.grad, sizes, axis=axis)):
            _accumulate(t, g)

    def forward():
        out.data = np.concatenate([t.data for t in items], axis=axis)

    return _finish(out, tape, backward, forward)


def take_rows(table, index: np.ndarray) -> Tensor:
    """Embedding lookup ``table[index]`` with a scatter-add backward."""
    table = as_tensor(table)
    index = np.asarray(index)
    out, tape = _node(table.data[index], (table,), "take_rows")

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, index, out.grad)
        _accumulate(table, g)

    def forward():
        out.data = table.data[index]

    return _finish(out, tape, backward, forward)


# ---------------------------------------------------------------- linear algebra


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matmul (both operands at least 2-D, numpy broadcasting on batch axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out, tape = _node(a.data @ b.data, (a, b), "matmul")

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad @ _swap_last(b.data))
        if b.requires_grad:
            _accumulate(b, _swap_last(a.data) @ out.grad)

    def forward():
        out.data = a.data @ b.data

    return _finish(out, tape, backward, forward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def f(x):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)

    out, tape = _node(f(a.data), (a,), "softmax")

    def backward():
        y, g = out.data, out.grad
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    def forward():
        out.data = f(a.data)

    return _finish(out, tape, backward, forward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def f(x):
        s = x - x.max(axis=axis, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    out, tape = _node(f(a.data), (a,), "log_softmax")

    def backward():
        g = out.grad
        _accumulate(a, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    def forward():
        out.data = f(a.data)

    return _finish(out, tape, backward, forward)


def xlogy_const(p: np.ndarray, q) -> Tensor:
    """``sum(p * log q)`` style helper: returns ``p * log(q)`` with 0 where p == 0."""
    q = as_tensor(q)
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0

    def f(x):
        return np.where(mask, p * np.log(np.where(mask, x, 1.0)), 0.0)

    out, tape = _node(f(q.data), (q,), "xlogy")

    def backward():
        _accumulate(q, out.grad * np.where(mask, p / np.where(mask, q.data, 1.0), 0.0))

    def forward():
        out.data = f(q.data)

    return _finish(out, tape, backward, forward)
