"""Tape-based reverse-mode autodiff over numpy float64 arrays.

Every policy keeps its parameters in one flat float64 vector. Losses are
written as functions ``loss_fn(p: Tensor) -> Tensor`` so the same callable
serves both :func:`grad` (reverse mode) and :func:`fd_grad` (central
differences).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

ParamVector = np.ndarray
GradVector = np.ndarray


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a backpropagated gradient is NaN/Inf."""


def _check(value: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced at node '{name}'")
    return value


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """A node in the computation graph.

    Constants (``requires_grad=False`` and no differentiable parents) record
    nothing, so plain forward evaluation costs little more than numpy.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = "leaf", _parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(value: np.ndarray, name: str, parents) -> "Tensor":
        _check(value, name)
        live = tuple((p, fn) for p, fn in parents if p.requires_grad)
        return Tensor(value, requires_grad=bool(live), name=name, _parents=live)

    def backward(self) -> None:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.grad is None:
                continue
            _check(node.grad, f"grad of {node.name}")
            for parent, fn in node._parents:
                g = fn(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.value + b.value,
            "add",
            [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.value, "neg", [(self, lambda g: -g)])

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.value * b.value,
            "mul",
            [
                (a, lambda g: _unbroadcast(g * b.value, a.shape)),
                (b, lambda g: _unbroadcast(g * a.value, b.shape)),
            ],
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.value / b.value,
            "div",
            [
                (a, lambda g: _unbroadcast(g / b.value, a.shape)),
                (b, lambda g: _unbroadcast(-g * a.value / b.value**2, b.shape)),
            ],
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def back(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return out

        return Tensor._make(a.value[idx], "getitem", [(a, back)])

    def square(self) -> "Tensor":
        a = self
        return Tensor._make(a.value**2, "square", [(a, lambda g: 2.0 * g * a.value)])

    def exp(self) -> "Tensor":
        a = self
        with np.errstate(over="ignore"):
            out = np.exp(a.value)
        return Tensor._make(out, "exp", [(a, lambda g: g * out)])

    def log(self) -> "Tensor":
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.value)
        return Tensor._make(out, "log", [(a, lambda g: g / a.value)])

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.value)
        return Tensor._make(out, "tanh", [(a, lambda g: g * (1.0 - out**2))])

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape).copy()

        return Tensor._make(a.value.sum(axis=axis, keepdims=keepdims), "sum", [(a, back)])

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor._make(a.value.reshape(*shape), "reshape", [(a, lambda g: g.reshape(a.shape))])

    def transpose(self, *axes) -> "Tensor":
        a = self
        inv = np.argsort(axes)
        return Tensor._make(
            a.value.transpose(*axes), "transpose", [(a, lambda g: g.transpose(*inv))]
        )

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.value - a.value.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        soft = np.exp(out)
        return Tensor._make(
            out,
            "log_softmax",
            [(a, lambda g: g - soft * g.sum(axis=axis, keepdims=True))],
        )

    def centered(self, axis: int = -1) -> "Tensor":
        """Subtract the mean along ``axis`` (logit centralization)."""
        return self - self.mean(axis=axis, keepdims=True)

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy(), name=f"detach({self.name})")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, name="const")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back_a(g):
        bv = b.value if b.ndim > 1 else b.value[:, None]
        gg = g if b.ndim > 1 else g[..., None]
        return _unbroadcast(gg @ np.swapaxes(bv, -1, -2), a.shape)

    def back_b(g):
        av = a.value if a.ndim > 1 else a.value[None, :]
        gg = g if a.ndim > 1 else g[..., None, :]
        if b.ndim == 1:
            return _unbroadcast((np.swapaxes(av, -1, -2) @ gg[..., None])[..., 0], b.shape)
        return _unbroadcast(np.swapaxes(av, -1, -2) @ gg, b.shape)

    return Tensor._make(a.value @ b.value, "matmul", [(a, back_a), (b, back_b)])


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def make_back(i):
        sl = [slice(None)] * parts[i].ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return Tensor._make(
        np.concatenate([p.value for p in parts], axis=axis),
        "concat",
        [(p, make_back(i)) for i, p in enumerate(parts)],
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    return Tensor._make(
        np.where(pick_a, a.value, b.value),
        "minimum",
        [
            (a, lambda g: _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
        ],
    )


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return Tensor._make(np.clip(a.value, lo, hi), "clip", [(a, lambda g: np.where(inside, g, 0.0))])


def stack(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p).reshape(1, *as_tensor(p).shape) for p in parts]
    return concat(parts, axis=0)


def parameter(p: ParamVector, name: str = "params") -> Tensor:
    return Tensor(np.array(p, dtype=np.float64), requires_grad=True, name=name)


def grad(loss_fn: Callable[[Tensor], Tensor], p: ParamVector) -> GradVector:
    """Exact reverse-mode gradient of a scalar ``loss_fn`` at ``p``."""
    leaf = parameter(p)
    out = loss_fn(leaf)
    if out.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {out.shape}")
    if not out.requires_grad:
        return np.zeros_like(leaf.value)
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return _check(g, "grad of params")


def value_and_grad(loss_fn: Callable[[Tensor], Tensor], p: ParamVector) -> tuple[float, GradVector]:
    leaf = parameter(p)
    out = loss_fn(leaf)
    if not out.requires_grad:
        return out.item(), np.zeros_like(leaf.value)
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return out.item(), _check(g, "grad of params")


def evaluate(loss_fn: Callable[[Tensor], Tensor], p: ParamVector) -> float:
    return as_tensor(loss_fn(Tensor(np.asarray(p, dtype=np.float64), name="params"))).item()


def fd_grad(loss_fn: Callable[[Tensor], Tensor], p: ParamVector, step: float = 1e-5) -> GradVector:
    """Central-difference gradient estimate, one coordinate at a time."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    for i in range(p.size):
        hi = p.copy()
        lo = p.copy()
        hi[i] += step
        lo[i] -= step
        out[i] = (evaluate(loss_fn, hi) - evaluate(loss_fn, lo)) / (2.0 * step)
    return _check(out, "finite difference")


def grad_agreement(g: GradVector, ref: GradVector, floor: float = 1e-6) -> tuple[float, float]:
    """Return (cosine similarity, max relative coordinate error) of ``g`` vs ``ref``.

    The relative error denominator is ``max(|g_i|, |ref_i|, floor)`` so that
    coordinates where both are ~0 do not blow up.
    """
    g = np.asarray(g, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    ng, nr = np.linalg.norm(g), np.linalg.norm(ref)
    if ng == 0.0 and nr == 0.0:
        cos = 1.0
    elif ng == 0.0 or nr == 0.0:
        cos = 0.0
    else:
        cos = float(g @ ref / (ng * nr))
    denom = np.maximum(np.maximum(np.abs(g), np.abs(ref)), floor)
    return cos, float(np.max(np.abs(g - ref) / denom)) if g.size else 0.0
