"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op records its parents and a backward closure. ``Tape`` orders the
reachable nodes by creation id, which is a valid topological order, and
replays them in reverse. Gradient sums are accumulated in that fixed order so
two backward passes over the same graph give bit-identical results.

Broadcasting is limited to a shared trailing shape (bias-style adds over
leading batch dimensions); everything else goes through ``expand``.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        Tape.record(self).backward(grad)

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


@dataclass
class Tape:
    """Nodes reachable from an output, in creation (topological) order."""

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        return cls(output, [seen[k] for k in sorted(seen)])

    def backward(self, grad=None):
        out = self.output
        if not out.requires_grad:
            raise ValueError("output does not require grad")
        if grad is None:
            if out.data.size != 1:
                raise ShapeError(f"backward needs an explicit grad for shape {out.shape}")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {out._id: np.asarray(grad, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_suffix(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, _sum_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -_sum_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, _sum_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product over the last two axes; ``b`` is either 2-D or shares ``a``'s leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1 - y),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    y = np.logaddexp(0, ad).astype(ad.dtype, copy=False)
    return _node(y, (a,), lambda g: (g * _sigmoid(ad),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return _node(ad * s, (a,), lambda g: (g * s * (1 + ad * (1 - s)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def masked_softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has no allowed entries")
        x = np.where(mask, x, -np.inf)
    e = x - x.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row softmax; disallowed entries get -inf logits and exactly zero weight."""
    y = masked_softmax(x.data, mask)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    y = xd - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _node(y, (x,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def index(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (size-1 axes or missing leading axes only)."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0 or any(s not in (1, t) for s, t in zip(src, shape[lead:])):
        raise ShapeError(f"expand: cannot broadcast {src} to {shape}")
    axes = tuple(range(lead)) + tuple(lead + i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1)

    def backward(g):
        g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice ``repeats`` times along ``axis`` (grouped-query head expansion)."""
    if repeats == 1:
        return a
    src = a.shape
    ax = axis % a.ndim

    def backward(g):
        new = src[:ax] + (src[ax], repeats) + src[ax + 1:]
        return (g.reshape(new).sum(axis=ax + 1),)

    return _node(np.repeat(a.data, repeats, axis=ax), (a,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    w = weight.data

    def backward(g):
        out = np.zeros_like(w)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (out,)

    return _node(w[ids], (weight,), backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    n = xd * r

    def backward(g):
        gw = _sum_to(g * n, wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gn = g * wd
            gx = r * (gn - n * (gn * n).mean(axis=-1, keepdims=True))
        return gx, gw

    return _node(n * wd, (x, weight), backward)


def l2_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).sum(axis=-1, keepdims=True) + eps)
    y = xd * r

    def backward(g):
        return (r * (g - y * (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding with precomputed tables broadcast over leading axes."""
    xd = x.data

    def backward(g):
        # inverse rotation: rotate_half is anti-self-adjoint
        return (g * cos - rotate_half(g * sin),)

    return _node(xd * cos + rotate_half(xd) * sin, (x,), backward)


def custom(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a fused op whose backward returns one grad (or None) per parent."""
    return _node(data, parents, backward)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: Iterable[tuple[int, ...]] | None = None, floor: float = 1e-12) -> float:
    """Max relative error of the analytic gradient against central differences.

    Each coordinate's error is |analytic - numeric| / (|numeric| + floor); a
    larger ``floor`` stops near-zero gradients from amplifying difference noise.
    """
    x.grad = None
    x.requires_grad = True
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if coords is None:
        coords = list(np.ndindex(*x.shape))
    worst = 0.0
    with no_grad():
        for c in coords:
            orig = x.data[c]
            x.data[c] = orig + eps
            fp = float(f(x).data)
            x.data[c] = orig - eps
            fm = float(f(x).data)
            x.data[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite value at coordinate {c}")
            numeric = (fp - fm) / (2 * eps)
            err = abs(float(analytic[c]) - numeric) / (abs(numeric) + floor)
            worst = max(worst, err)
    return worst
