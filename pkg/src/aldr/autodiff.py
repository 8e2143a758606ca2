"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a backward rule.  Nodes receive a monotonically increasing id when
they are created, so sorting the reachable nodes by id yields the insertion
(topological) order; :func:`backward` walks that order in reverse.

Gradient gating: parameters carry the name of the group they belong to, and
``backward(root, allowed=...)`` only accumulates into parameters whose group is
listed.  Subgraphs that cannot reach an allowed parameter are skipped entirely.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, ParameterError

GROUP_NAMES = ("E_p", "E_e", "C_speaker", "C_adv", "D_r")

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "group", "name", "_parents", "_backward", "_id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        group: str | None = None,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.group = group
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def backward(self, allowed=None) -> None:
        backward(self, allowed)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tag = f", group={self.group}" if self.group else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


@dataclass
class ParamGroup:
    """Named set of trainable tensors; the unit of gradient routing."""

    name: str
    params: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.name not in GROUP_NAMES:
            raise ParameterError(f"unknown parameter group {self.name!r}; expected one of {GROUP_NAMES}")
        for p in self.params:
            p.group = self.name

    def add(self, param: Tensor) -> Tensor:
        param.group = self.name
        self.params.append(param)
        return param

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)


def parameter(data, group: str | None = None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, group=group, name=name)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, True, _parents=parents, _backward=backward_fn)


def trace(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root`` through differentiable edges, in insertion order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in seen)
    return [seen[i] for i in sorted(seen)]


def _group_names(allowed) -> set[str] | None:
    if allowed is None:
        return None
    if isinstance(allowed, (str, ParamGroup)):
        allowed = [allowed]
    return {a.name if isinstance(a, ParamGroup) else a for a in allowed}


def backward(root: Tensor, allowed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every permitted leaf.

    ``allowed`` is ``None`` (every leaf that requires grad) or an iterable of
    group names / :class:`ParamGroup` objects.  Grads of leaves outside the
    allowed groups are left untouched.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    groups = _group_names(allowed)
    order = trace(root)

    live: dict[int, bool] = {}
    for t in order:
        if t.is_leaf:
            live[t._id] = groups is None or t.group in groups
        else:
            live[t._id] = any(live.get(p._id, False) for p in t._parents)

    pending: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for t in reversed(order):
        g = pending.pop(t._id, None)
        if g is None or not live[t._id]:
            continue
        if t.is_leaf:
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad += g
            continue
        needs = tuple(p.requires_grad and live.get(p._id, False) for p in t._parents)
        for p, need, pg in zip(t._parents, needs, t._backward(g, needs)):
            if not need or pg is None:
                continue
            prev = pending.get(p._id)
            pending[p._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# operations


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for a batch of row vectors."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or b.shape[0] != W.shape[1]:
        raise DimensionError(f"affine: x{x.shape} incompatible with W{W.shape} and b{b.shape}")
    xd, Wd = x.data, W.data

    def _bw(g, needs):
        return (
            g @ Wd.T if needs[0] else None,
            xd.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _make(xd @ Wd + b.data, (x, W, b), _bw)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # B, C, H', W', kh, kw (a strided view, no copy)
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    win = _windows(x, k.shape[2], k.shape[3], stride)
    return np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int, in_hw: tuple[int, int]) -> np.ndarray:
    B, _, Ho, Wo = g.shape
    _, C, kh, kw = k.shape
    dx = np.zeros((B, C) + tuple(in_hw))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dx[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += contrib
    return dx


def _conv_kernel_grad(g: np.ndarray, x: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    win = _windows(x, kh, kw, stride)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def conv_output_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation of ``x[B,C,H,W]`` with ``kernel[F,C,kh,kw]``."""
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    H, W = x.shape[2:]
    kh, kw = kernel.shape[2:]
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {kernel.shape[0]} filters")
    xd, kd = x.data, kernel.data
    out = _conv_forward(xd, kd, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _bw(g, needs):
        grads = [
            _conv_input_grad(g, kd, stride, (H, W)) if needs[0] else None,
            _conv_kernel_grad(g, xd, stride, kh, kw) if needs[1] else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, _bw)


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    output_size: tuple[int, int] | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``kernel`` is ``[C_in, C_out, kh, kw]``.

    ``output_size`` picks among the spatial sizes that a stride > 1 convolution
    would map onto ``x``'s size; default is the smallest.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}")
    h, w = x.shape[2:]
    kh, kw = kernel.shape[2:]
    if output_size is None:
        output_size = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    H, W = output_size
    if H < kh or W < kw or conv_output_size(H, kh, stride) != h or conv_output_size(W, kw, stride) != w:
        raise DimensionError(f"conv_transpose2d: output size {output_size} unreachable from input {x.shape}")
    xd, kd = x.data, kernel.data
    out = _conv_input_grad(xd, kd, stride, (H, W))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _bw(g, needs):
        grads = [
            _conv_forward(g, kd, stride) if needs[0] else None,
            _conv_kernel_grad(xd, g, stride, kh, kw) if needs[1] else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g, needs: (g * (1.0 - y * y),))


def nonlinearity(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ParameterError(f"unknown nonlinearity {kind!r}")


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation of ``a[B,D1]`` and ``b[B,D2]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat: batch mismatch between {a.shape} and {b.shape}")
    split = a.shape[1]
    return _make(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g, needs: (g[:, :split], g[:, split:]),
    )


def detach(x: Tensor) -> Tensor:
    """Same values, no backward edge."""
    return Tensor(x.data)


def mean(x: Tensor, axis: int) -> Tensor:
    """Average over one axis (temporal average pooling when ``axis`` is time)."""
    axis = axis % x.ndim
    n = x.shape[axis]

    def _bw(g, needs):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _make(x.data.mean(axis=axis), (x,), _bw)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(out, (x,), lambda g, needs: (g.sum(axis=axis),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(old),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar."""
    return _make(np.array(x.data.sum()), (x,), lambda g, needs: (np.broadcast_to(g, x.shape).copy(),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g, needs: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(x.data * factor, (x,), lambda g, needs: (g * factor,))


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``sum(w * t)`` over equally shaped tensors."""
    if len(terms) != len(weights) or not terms:
        raise DimensionError("weighted_sum needs one weight per term")
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise DimensionError(f"weighted_sum: shapes {[t.shape for t in terms]} differ")
    ws = [float(w) for w in weights]
    out = sum(w * t.data for w, t in zip(ws, terms))
    return _make(np.asarray(out, dtype=np.float64), terms, lambda g, needs: [g * w for w in ws])
