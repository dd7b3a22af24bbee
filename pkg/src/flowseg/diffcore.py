"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation validates its inputs, produces a finite result, and records
a backward closure on the implicit tape (the graph of parent links carried
by each tensor).  Gradients accumulate additively across backward calls
until explicitly zeroed.  Tensor value buffers are frozen after creation;
updates replace the buffer rather than mutating it, so a recorded graph can
always be replayed.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain (log <= 0, div by 0)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def _finite_or_raise(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


class Tensor:
    """A float64 array plus an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _finite_or_raise(arr, "tensor construction")
        self.data = _freeze(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, arr: np.ndarray, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _freeze(np.ascontiguousarray(arr, dtype=np.float64))
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A view of the same values with no tape linkage."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def assign(self, arr: np.ndarray) -> None:
        """Replace the value buffer of a leaf (parameter update)."""
        if self._parents:
            raise ValueError("assign is only valid on leaf tensors")
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != tensor shape {self.data.shape}")
        _finite_or_raise(arr, "assign")
        self.data = _freeze(arr)

    # -- binary elementwise ops (numpy broadcasting) ------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b, op: str) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data
        try:
            res = fwd(a, b)
        except ValueError as exc:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from exc
        _finite_or_raise(res, op)

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                _accumulate(self, _unbroadcast(bwd_a(g, a, b), a.shape))
            if other.requires_grad:
                _accumulate(other, _unbroadcast(bwd_b(g, a, b), b.shape))

        return Tensor._from_op(res, (self, other), backward)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b: g, lambda g, a, b: g, "add")

    def __radd__(self, other):
        return Tensor(other).__add__(self)

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g, "sub")

    def __rsub__(self, other):
        return Tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, np.multiply,
                            lambda g, a, b: g * b, lambda g, a, b: g * a, "mul")

    def __rmul__(self, other):
        return Tensor(other).__mul__(self)

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if np.any(other.data == 0.0):
            raise DomainError("div: denominator contains zero")
        return self._binary(other, np.divide,
                            lambda g, a, b: g / b,
                            lambda g, a, b: -g * a / (b * b), "div")

    def __rtruediv__(self, other):
        return Tensor(other).__truediv__(self)

    def __neg__(self):
        def backward(g: np.ndarray) -> None:
            _accumulate(self, -g)
        return Tensor._from_op(-self.data, (self,), backward)

    # -- unary elementwise ops ----------------------------------------------

    def exp(self) -> "Tensor":
        res = _finite_or_raise(np.exp(self.data), "exp")

        def backward(g: np.ndarray) -> None:
            _accumulate(self, g * res)

        return Tensor._from_op(res, (self,), backward)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError("log: operand contains values <= 0")
        res = np.log(self.data)

        def backward(g: np.ndarray) -> None:
            _accumulate(self, g / self.data)

        return Tensor._from_op(res, (self,), backward)

    def tanh(self) -> "Tensor":
        res = np.tanh(self.data)

        def backward(g: np.ndarray) -> None:
            _accumulate(self, g * (1.0 - res * res))

        return Tensor._from_op(res, (self,), backward)

    def square(self) -> "Tensor":
        res = _finite_or_raise(self.data * self.data, "square")

        def backward(g: np.ndarray) -> None:
            _accumulate(self, g * 2.0 * self.data)

        return Tensor._from_op(res, (self,), backward)

    # -- contractions ---------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        res = _finite_or_raise(a @ b, "matmul")

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                _accumulate(self, g @ b.T)
            if other.requires_grad:
                _accumulate(other, a.T @ g)

        return Tensor._from_op(res, (self, other), backward)

    def __matmul__(self, other):
        return self.matmul(other)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        res = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        _finite_or_raise(res, "sum")
        shape = self.data.shape
        # storage promotes 0-d results to (1,), so the incoming gradient is
        # reshaped back to the true reduced shape before re-expansion
        reduced_shape = res.shape

        def backward(g: np.ndarray) -> None:
            if axis is None:
                _accumulate(self, np.broadcast_to(g, shape).copy())
                return
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            gg = np.asarray(g).reshape(reduced_shape)
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            _accumulate(self, np.broadcast_to(gg, shape).copy())

        return Tensor._from_op(res, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.data.shape[a % self.data.ndim] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int) -> "Tensor":
        axis_n = _norm_axis(axis, self.data.ndim, "max")
        res = np.asarray(self.data.max(axis=axis_n))
        idx = self.data.argmax(axis=axis_n)
        shape = self.data.shape
        reduced_shape = res.shape

        def backward(g: np.ndarray) -> None:
            # gradient routes to the first maximal element along the axis
            full = np.zeros(shape)
            gg = np.asarray(g).reshape(reduced_shape)
            np.put_along_axis(full, np.expand_dims(idx, axis_n),
                              np.expand_dims(gg, axis_n), axis=axis_n)
            _accumulate(self, full)

        return Tensor._from_op(res, (self,), backward)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            res = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {self.data.shape} as {shape}") from exc
        src = self.data.shape

        def backward(g: np.ndarray) -> None:
            _accumulate(self, g.reshape(src))

        return Tensor._from_op(res, (self,), backward)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        if sorted(axes) != list(range(self.data.ndim)):
            raise ShapeError(
                f"transpose: axes {axes} is not a permutation for shape {self.data.shape}")
        inverse = tuple(np.argsort(axes))

        def backward(g: np.ndarray) -> None:
            _accumulate(self, np.ascontiguousarray(g.transpose(inverse)))

        return Tensor._from_op(np.ascontiguousarray(self.data.transpose(axes)),
                               (self,), backward)

    def broadcast(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(shape)
        try:
            res = np.broadcast_to(self.data, shape)
        except ValueError as exc:
            raise ShapeError(f"broadcast: cannot expand {self.data.shape} to {shape}") from exc
        src = self.data.shape

        def backward(g: np.ndarray) -> None:
            _accumulate(self, _unbroadcast(g, src))

        return Tensor._from_op(res.copy(), (self,), backward)

    def slice(self, axis: int, start: int, stop: int) -> "Tensor":
        axis_n = _norm_axis(axis, self.data.ndim, "slice")
        n = self.data.shape[axis_n]
        if not (0 <= start < stop <= n):
            raise ShapeError(f"slice: [{start}:{stop}] invalid for axis {axis} of length {n}")
        key = tuple(slice(None) if i != axis_n else slice(start, stop)
                    for i in range(self.data.ndim))
        res = self.data[key]
        shape = self.data.shape

        def backward(g: np.ndarray) -> None:
            full = np.zeros(shape)
            full[key] = g
            _accumulate(self, full)

        return Tensor._from_op(res.copy(), (self,), backward)

    def softmax(self, axis: int) -> "Tensor":
        axis_n = _norm_axis(axis, self.data.ndim, "softmax")
        shifted = self.data - self.data.max(axis=axis_n, keepdims=True)
        e = np.exp(shifted)
        res = e / e.sum(axis=axis_n, keepdims=True)

        def backward(g: np.ndarray) -> None:
            dot = (g * res).sum(axis=axis_n, keepdims=True)
            _accumulate(self, (g - dot) * res)

        return Tensor._from_op(res, (self,), backward)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros(t.data.shape)
    t.grad += g


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along an axis."""
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    axis_n = _norm_axis(axis, tensors[0].data.ndim, "concat")
    try:
        res = np.concatenate([t.data for t in tensors], axis=axis_n)
    except ValueError as exc:
        shapes = [t.data.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not conform on axis {axis}") from exc
    sizes = [t.data.shape[axis_n] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                key = tuple(slice(None) if i != axis_n else slice(a, b)
                            for i in range(g.ndim))
                _accumulate(t, g[key])

    return Tensor._from_op(res, tuple(tensors), backward)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*9) patches of the zero-padded input."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    b, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def _conv_raw(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, _, h, wd = x.shape
    col = _im2col(x)
    out = col @ w.reshape(w.shape[0], -1).T
    return out.reshape(b, h, wd, w.shape[0]).transpose(0, 3, 1, 2), col


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """2D cross-correlation, 3x3 kernel, stride 1, zero padding 1.

    x: (B, C_in, H, W), w: (C_out, C_in, 3, 3) -> (B, C_out, H, W).
    """
    xa, wa = x.data, w.data
    if xa.ndim != 4 or wa.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input and kernel, got {xa.shape} and {wa.shape}")
    if wa.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be 3x3, got {wa.shape}")
    if xa.shape[1] != wa.shape[1]:
        raise ShapeError(f"conv2d: input channels {xa.shape} do not match kernel {wa.shape}")
    res, col = _conv_raw(xa, wa)
    _finite_or_raise(res, "conv2d")
    b, cout, h, wd = res.shape

    def backward(g: np.ndarray) -> None:
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ col).reshape(wa.shape))
        if x.requires_grad:
            # full correlation of the upstream gradient with the flipped kernel
            w_flip = wa[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx, _ = _conv_raw(g, np.ascontiguousarray(w_flip))
            _accumulate(x, dx)

    return Tensor._from_op(res, (x, w), backward)


def trace(root: Tensor) -> list[Tensor]:
    """Topologically ordered tape below root (parents before children)."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-propagate from a scalar loss into leaf .grad buffers.

    Each tape node is visited exactly once, in reverse topological order;
    contributions from multiple consumers are summed before the node's own
    backward closure runs.  Leaf gradients accumulate additively across
    calls until zero_grad.
    """
    global _accumulate
    if loss.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: root does not require grad")
    order = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.data.shape)}

    def sink(t: Tensor, g: np.ndarray) -> None:
        grads[id(t)] = grads.get(id(t), 0.0) + g

    saved = _accumulate
    _accumulate = sink  # type: ignore[assignment]
    try:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g)
            elif node.requires_grad:
                saved(node, g)
    finally:
        _accumulate = saved


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences."""
    leaf = Tensor(x.data, requires_grad=True)
    out = fn(leaf)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: fn must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros(leaf.data.shape)

    flat = x.data.ravel()
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = fn(Tensor(bumped.reshape(x.data.shape))).item()
        bumped[i] = flat[i] - eps
        lo = fn(Tensor(bumped.reshape(x.data.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * eps)

    a, n = analytic.ravel(), numeric
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if flat.size else 0.0
