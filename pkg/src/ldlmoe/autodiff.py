"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation executed while it is active.  Leaf
tensors created with ``requires_grad=True`` are the trainable parameters;
``tape.backward(loss)`` walks the recorded nodes in strict reverse insertion
order and returns a ``{parameter: gradient}`` map.  A tape can be walked once.

    tape = Tape()
    with tape:
        loss = ((w * x) - y).square().mean()
    grads = tape.backward(loss)
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ldlmoe_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("kind", "parents", "pullback", "out")

    def __init__(self, kind, parents, pullback, out):
        self.kind = kind
        self.parents = parents
        self.pullback = pullback
        self.out = out


class Tape:
    """Append-only record of operations; single use."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.used = False
        self._token = None

    def __enter__(self):
        if self.used:
            raise TapeError("tape has already been consumed by backward()")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        if self.used:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.pullback(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.tracked:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.requires_grad:
                    leaves[key] = parent
        return {t: grads[k] for k, t in leaves.items() if k in grads}


def backward(loss: "Tensor") -> dict["Tensor", np.ndarray]:
    """Backpropagate through the tape that produced ``loss``."""
    if loss.tape is None:
        raise TapeError("loss was not computed under an active tape")
    return loss.tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "name", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.name = name

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.tape is not None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        if isinstance(other, Tensor):
            return div(self, other)
        return div_scalar(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def square(self):
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind: str, out_data: np.ndarray, parents: Sequence[Tensor],
           pullback: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    """Create an op output and, when a tape is active, append its node.

    ``pullback`` maps the output cotangent to one cotangent per parent
    (``None`` for parents that need none).  Custom fused ops use this too.
    """
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.tracked for p in parents):
        if tape.used:
            raise TapeError("cannot record on a consumed tape")
        tape.nodes.append(Node(kind, tuple(parents), pullback, out))
        out.tape = tape
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bd, ad.shape),
                             _unbroadcast(-g * out / bd, bd.shape)))


def div_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("div_scalar", a.data / c, (a,), lambda g: (g / c,))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return record("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is strictly inside."""
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return record("clip", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def pullback(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.tracked else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.tracked else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return record("matmul", out, (a, b), pullback)


# ------------------------------------------------------------------ reductions

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    return record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                  lambda g: (np.array(_expand(g, shape, axis, keepdims)),))


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)
    return record("mean", out, (a,),
                  lambda g: (np.array(_expand(g, shape, axis, keepdims)) / n,))


def variance(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Population variance (ddof=0)."""
    shape = a.shape
    centered = a.data - np.mean(a.data, axis=axis, keepdims=True)
    out = np.mean(centered * centered, axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)
    return record("variance", out, (a,),
                  lambda g: (2.0 * centered * _expand(g, shape, axis, keepdims) / n,))


def softmax_with_temperature(z: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = z.data / tau
    s = np.exp(s - s.max(axis=axis, keepdims=True))
    p = s / s.sum(axis=axis, keepdims=True)

    def pullback(g):
        # Jacobian-vector product: p * (g - <g, p>)
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)) / tau,)

    return record("softmax", p, (z,), pullback)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    _check_broadcast("cosine_similarity", a, b)
    ad, bd = a.data, b.data
    na = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True)) + eps
    nb = np.sqrt(np.sum(bd * bd, axis=axis, keepdims=True)) + eps
    dot = np.sum(ad * bd, axis=axis, keepdims=True)
    out = dot / (na * nb)
    # d na / d a = a / (na - eps)
    ra = ad / np.maximum(na - eps, 1e-300)
    rb = bd / np.maximum(nb - eps, 1e-300)

    def pullback(g):
        g = np.expand_dims(g, axis)
        ga = g * (bd / (na * nb) - out / na * ra)
        gb = g * (ad / (na * nb) - out / nb * rb)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("cosine", np.squeeze(out, axis=axis), (a, b), pullback)


# --------------------------------------------------------------- restructuring

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    lead = (slice(None),) * (axis % out.ndim)

    def pullback(g):
        return tuple(g[lead + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(tensors)))

    return record("concat", out, tensors, pullback)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return record("stack", out, tensors,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def pullback(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record("slice", a.data[idx], (a,), pullback)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return record("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                  lambda g: (np.swapaxes(g, ax1, ax2),))


def maximum(a: Tensor, c: float) -> Tensor:
    ad = a.data
    return record("maximum", np.maximum(ad, c), (a,), lambda g: (g * (ad > c),))


# ------------------------------------------------------------------- optimizer

class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update.  Missing gradients count as zero."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total
