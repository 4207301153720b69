"""Dense float64 tensors with a reverse-mode differentiation tape.

Every tensor produced by an operation keeps references to its operands and a
backward rule when at least one operand requires a gradient.  The recorded
graph is linearised into a :class:`Tape` on demand, so a backward pass never
mutates the tensors it walks and can be repeated.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "matmul",
    "relu",
    "tanh",
    "conv2d",
    "softmax_cross_entropy",
    "take_columns",
    "pick",
    "grad",
    "backward_grad",
    "finite_difference_check",
    "backward_call_count",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity entered or left a primitive."""


class TapeError(RuntimeError):
    """Backward pass requested for something not on the tape."""


_BACKWARD_CALLS = 0


def backward_call_count() -> int:
    """Number of backward passes run in this process (used to prove black-box attacks never differentiate)."""
    return _BACKWARD_CALLS


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        arr = np.array(data, dtype=np.float64)
        if op == "leaf":
            _check_finite(arr, "input tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient."""
        grads = Tape.from_output(self).run(self)
        for node_id, (node, g) in grads.items():
            if node._backward is None and node.requires_grad:
                node.grad = g


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, f"output of {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward, "tanh")


# linear algebra and reductions ------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (x,), backward, "reshape")


def take_columns(x: Tensor, cols) -> Tensor:
    """Select columns of a 2-D tensor (``x[:, cols]``)."""
    cols = np.asarray(cols)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None), cols), g)
        return (out,)

    return _make(x.data[:, cols], (x,), backward, "take_columns")


def pick(x: Tensor, idx) -> Tensor:
    """Per-row selection ``x[i, idx[i]]`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: shapes {x.shape} and {idx.shape} do not match")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _make(x.data[rows, idx], (x,), backward, "pick")


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.  ``x`` is NCHW, ``w`` is (K, C, 3, 3)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,K
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # N,H,W,K
        gw = None
        if w.requires_grad:
            gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 2, 3]))  # K,C,3,3
        gx = None
        if x.requires_grad:
            dcols = np.tensordot(gt, w.data, axes=([3], [0]))  # N,H,W,C,3,3
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused, numerically stable softmax + cross-entropy.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-example vector).
    """
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    n, c = z.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    top = z.argmax(axis=1)
    m = z[rows, top]
    e = np.exp(z - m[:, None])
    rest = e.sum(axis=1) - 1.0
    # log-sum-exp as m + log1p(sum of the non-max terms) keeps saturated losses accurate
    e_rest = e.copy()
    e_rest[rows, top] = 0.0
    lse = m + np.log1p(e_rest.sum(axis=1))
    per = lse - z[rows, labels]
    per = np.maximum(per, 0.0)
    probs = e / (1.0 + rest)[:, None]
    if reduction == "none":
        value, scale = per, None
    elif reduction == "sum":
        value, scale = np.asarray(per.sum()), 1.0
    elif reduction == "mean":
        value, scale = np.asarray(per.mean()), 1.0 / n
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        if scale is None:
            return (d * g[:, None],)
        return (d * (g * scale),)

    return _make(value, (logits,), backward, "softmax_cross_entropy")


# tape -------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the operations behind one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self._ids = {id(n) for n in nodes}

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        if not out.requires_grad:
            return cls(order)
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, out: Tensor, grad_output: np.ndarray | None = None) -> dict[int, tuple[Tensor, np.ndarray]]:
        """Propagate adjoints from ``out``; returns ``{id: (tensor, grad)}`` for every node."""
        global _BACKWARD_CALLS
        _BACKWARD_CALLS += 1
        if grad_output is None:
            grad_output = np.ones(out.shape)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad_output, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
        by_id = {id(n): n for n in self.nodes}
        return {k: (by_id[k], v) for k, v in grads.items()}


def grad(out: Tensor, leaves: Sequence[Tensor], grad_output: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of ``out`` with respect to each of ``leaves``.

    ``out`` must be a single-element tensor unless ``grad_output`` is given.
    Leaves that ``out`` does not depend on raise :class:`TapeError`.
    """
    if grad_output is None and out.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {out.shape}")
    tape = Tape.from_output(out)
    for leaf in leaves:
        if leaf not in tape:
            raise TapeError(f"leaf {leaf!r} is not on the tape of this output")
    grads = tape.run(out, grad_output)
    return [
        np.array(grads[id(leaf)][1], dtype=np.float64).reshape(leaf.shape)
        if id(leaf) in grads else np.zeros(leaf.shape)
        for leaf in leaves
    ]


def backward_grad(scalar_out: Tensor, leaf: Tensor) -> np.ndarray:
    return grad(scalar_out, [leaf])[0]


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x, step: float = 1e-5, analytic: np.ndarray | None = None
) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The relative error per coordinate is ``|a - n| / (|a| + 1e-12)``; a
    coordinate where both are exactly zero counts as 0.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if analytic is None:
        leaf = Tensor(x0, requires_grad=True)
        out = f(leaf)
        analytic = backward_grad(out, leaf) if out.requires_grad else np.zeros_like(x0)
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_difference_check: non-finite evaluation")
        numeric[i] = (fp - fm) / (2 * step)
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    diff = np.abs(a - numeric)
    err = np.where(diff == 0, 0.0, diff / (np.abs(a) + 1e-12))
    return float(err.max()) if err.size else 0.0
