"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive records its parents and a backward closure on the output
tensor. ``backprop`` walks the graph in reverse topological order and
accumulates gradients into leaves that have ``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12
VAR_FLOOR = 1e-12
MASK_VALUE = -1e30

_state = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class DegenerateVectorError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, frozen passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backprop(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes): return transpose(self, axes)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(values)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backprop(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every grad leaf."""
    if output.values.size != 1 or output.ndim > 1:
        raise ValueError(f"backprop needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar operand is the scalar-multiply primitive."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.values * b.values, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.values @ b.values
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        av, bv = a.values, b.values
        ga = gb = None
        if a.requires_grad:
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv)
            else:
                ga = g @ np.swapaxes(bv, -1, -2)
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            elif bv.ndim == 1:
                gb = (av * g[..., None]).reshape(-1, av.shape[-1]).sum(axis=0)
            elif bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def slice_(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the backward scatters with add.at."""
    x = as_tensor(x)
    try:
        out = x.values[index]
    except IndexError as exc:
        raise ShapeError("slice", x.shape, str(index)) from exc

    def backward(g):
        gx = np.zeros_like(x.values)
        if _is_basic(index):
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, dtype=DTYPE), (x,), backward, "slice")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.values.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "mean")


def concat_tokens(parts: Sequence[Tensor], batch: int | None = None) -> Tensor:
    """Concatenate along the token axis (-2).

    Parts may be ``(L_i, D)`` (shared across the batch) or ``(B, L_i, D)``.
    Shared parts are broadcast to the batch and their gradient is summed.
    """
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_tokens", ())
    if batch is None:
        batch = next((p.shape[0] for p in parts if p.ndim == 3), None)
    dim = parts[0].shape[-1]
    blocks = []
    for p in parts:
        if p.ndim not in (2, 3) or p.shape[-1] != dim or (p.ndim == 3 and p.shape[0] != batch):
            raise ShapeError("concat_tokens", *(q.shape for q in parts))
        if batch is not None and p.ndim == 2:
            blocks.append(np.broadcast_to(p.values, (batch,) + p.shape))
        else:
            blocks.append(p.values)
    out = np.concatenate(blocks, axis=-2)
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def backward(g):
        grads = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if not p.requires_grad:
                grads.append(None)
                continue
            piece = g[..., lo:hi, :]
            if p.ndim == 2 and piece.ndim == 3:
                piece = piece.sum(axis=0)
            grads.append(piece)
        return grads

    return _make(out, parts, backward, "concat_tokens")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis. Variance is floored, so constant rows map to ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    floored = var < VAR_FLOOR
    inv = 1.0 / np.sqrt(np.maximum(var, VAR_FLOOR))
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.values
            # floored rows: variance is a constant, only the centering remains
            full = inv * (gh - gh.mean(axis=-1, keepdims=True)
                          - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            cent = inv * (gh - gh.mean(axis=-1, keepdims=True))
            gx = np.where(floored, cent, full)
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layer_norm")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.values
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward, "gelu")


def cosine_similarity(a, b) -> Tensor:
    """Cosine along the last axis, broadcasting leading axes; clamped to [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-1]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    _broadcast_shape("cosine_similarity", a, b)
    na = np.sqrt((a.values * a.values).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.values * b.values).sum(axis=-1, keepdims=True))
    if (na <= NORM_EPS).any() or (nb <= NORM_EPS).any():
        raise DegenerateVectorError("cosine_similarity: vector norm at or below 1e-12")
    ua, ub = a.values / na, b.values / nb
    cos = (ua * ub).sum(axis=-1)
    out = np.clip(cos, -1.0, 1.0)

    def backward(g):
        g = g[..., None]
        c = cos[..., None]
        ga = _unbroadcast(g * (ub - c * ua) / na, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * (ua - c * ub) / nb, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "cosine_similarity")


def masked_fill(x: Tensor, keep: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``keep`` is False with a large negative constant."""
    x = as_tensor(x)
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.values, value)
    return _make(out, (x,), lambda g: (np.where(keep, g, 0.0),), "masked_fill")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows; a 1-D input is a single row."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rows = logits.values[None, :] if single else logits.values
    if rows.ndim != 2 or labels.shape != (rows.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if (labels < 0).any() or (labels >= rows.shape[1]).any():
        raise IndexError(f"cross_entropy: label out of range for {rows.shape[1]} classes")
    n = rows.shape[0]
    shifted = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    loss = np.maximum(lse - picked, 0.0).mean()

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        gl = p * (g / n)
        return (gl[0] if single else gl,)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


def identity(x: Tensor, on_backward: Callable[[], None] | None = None) -> Tensor:
    """Pass-through node; ``on_backward`` fires once per backprop that reaches it."""
    x = as_tensor(x)

    def backward(g):
        if on_backward is not None:
            on_backward()
        return (g,)

    return _make(x.values, (x,), backward, "identity")
