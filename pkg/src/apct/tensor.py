"""Dense tensors with define-by-run reverse-mode autodiff.

Tensors wrap numpy arrays. Operations executed while a :class:`Tape` is
active, and touching at least one tensor with ``requires_grad``, are
recorded on that tape together with a vector-Jacobian callback.
:func:`backward` replays the tape in reverse.

Arrays may carry leading batch axes; matmul and the reductions act on the
trailing axes. Elementwise ops broadcast like numpy and reduce gradients
back to each operand's shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError, NumericFault

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
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

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tracked = bool(_ACTIVE) and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        _ACTIVE[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    out = av + bv

    def vjp(g):
        ga = _unbroadcast(g, np.shape(av)) if _needs(a) else None
        gb = _unbroadcast(g, np.shape(bv)) if _needs(b) else None
        return ga, gb

    return _emit(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    out = av - bv

    def vjp(g):
        ga = _unbroadcast(g, np.shape(av)) if _needs(a) else None
        gb = _unbroadcast(-g, np.shape(bv)) if _needs(b) else None
        return ga, gb

    return _emit(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    out = av * bv

    def vjp(g):
        ga = _unbroadcast(g * bv, np.shape(av)) if _needs(a) else None
        gb = _unbroadcast(g * av, np.shape(bv)) if _needs(b) else None
        return ga, gb

    return _emit(out, (a, b), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d gelu / dx given ``t = tanh(c * (x + 0.044715 x^3))``."""
    x2 = x * x
    return 0.5 * (1.0 + t) + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 3 * 0.044715 * x2)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth everywhere, which keeps finite differences honest)."""
    xv = x.data
    t = np.tanh(_GELU_C * xv * (1.0 + 0.044715 * (xv * xv)))
    out = 0.5 * xv * (1.0 + t)
    return _emit(out, (x,), lambda g: (g * _gelu_grad(xv, t),))


def relu(x: Tensor) -> Tensor:
    xv = x.data
    return _emit(np.maximum(xv, 0), (x,), lambda g: (g * (xv > 0),))


# shape ops -------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    # contiguous copies keep the following batched matmuls on the BLAS path
    return _emit(
        np.ascontiguousarray(np.swapaxes(x.data, a1, a2)),
        (x,),
        lambda g: (np.ascontiguousarray(np.swapaxes(g, a1, a2)),),
    )


def transpose(x: Tensor) -> Tensor:
    return swapaxes(x, -1, -2)


# linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix
    (shared weights) or has the same batch axes as ``a``.
    """
    av, bv = _raw(a), _raw(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {np.shape(av)} and {np.shape(bv)}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {av.shape} @ {bv.shape}")
    if bv.ndim > 2 and bv.shape[:-2] != av.shape[:-2]:
        raise DimensionError(f"matmul batch axes disagree: {av.shape} @ {bv.shape}")
    shared = bv.ndim == 2 and av.ndim > 2
    if shared:
        # one BLAS call instead of a batched loop
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv

    def vjp(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if _needs(a):
                ga = (g2 @ bv.T).reshape(av.shape)
            if _needs(b):
                gb = a2.T @ g2
        else:
            if _needs(a):
                ga = g @ np.ascontiguousarray(np.swapaxes(bv, -1, -2))
            if _needs(b):
                gb = np.ascontiguousarray(np.swapaxes(av, -1, -2)) @ g
        return ga, gb

    return _emit(out, (a, b), vjp)


# reductions ------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    return _emit(np.asarray(x.data.sum(), dtype=dt), (x,), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean_all(x: Tensor) -> Tensor:
    shape, dt, size = x.shape, x.dtype, x.data.size
    return _emit(
        np.asarray(x.data.mean(), dtype=dt), (x,), lambda g: (np.full(shape, g / size, dtype=dt),)
    )


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    xv = x.data
    axis = axis % xv.ndim
    idx = np.expand_dims(xv.argmax(axis=axis), axis)
    out = np.take_along_axis(xv, idx, axis=axis).squeeze(axis)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit(out, (x,), vjp)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis."""
    xv = x.data
    n = np.sqrt((xv * xv).sum(axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[..., None] > 0, xv / safe[..., None], 0.0) * g[..., None],)

    return _emit(n, (x,), vjp)


# normalizers -----------------------------------------------------------------


def softmax_masked(logits, mask=None) -> Tensor:
    """Softmax over the last axis after adding an additive {0, -inf} mask.

    Masked entries come out exactly zero. A row with no finite entry raises
    :class:`DegenerateRowError`.
    """
    lv = _raw(logits)
    if mask is not None:
        mv = _raw(mask)
        if np.shape(mv) != np.shape(lv) and np.broadcast_shapes(np.shape(mv), np.shape(lv)) != np.shape(lv):
            raise DimensionError(f"mask shape {np.shape(mv)} does not fit logits {np.shape(lv)}")
        z = lv + mv
    else:
        z = lv
    zmax = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        if np.any(np.isneginf(zmax)):
            raise DegenerateRowError("softmax row has every entry masked")
        raise NumericFault("non-finite attention logits")
    e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        return gz, None

    return _emit(y, (logits, mask), vjp)


def softmax(logits) -> Tensor:
    return softmax_masked(logits, None)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xv, gv, bv = x.data, gamma.data, beta.data
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv

    def vjp(g):
        gx = ggam = gbet = None
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, gv.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbet = g.reshape(-1, bv.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggam, gbet

    return _emit(out, (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise ``logits``."""
    lv = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ContractError(f"cross_entropy expects (B, K) logits and (B,) labels, got {lv.shape}, {labels.shape}")
    z = lv - lv.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(lv.shape[0])
    loss = np.asarray(-logp[rows, labels].mean(), dtype=lv.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / lv.shape[0]),)

    return _emit(loss, (logits,), vjp)


# backward pass ---------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to tape leaves.

    Returns a mapping from each requested tensor (default: every leaf with
    ``requires_grad`` that the tape touched) to its gradient array. Leaves
    that do not influence ``loss`` get zeros.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        produced.add(id(node.out))
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not _needs(inp):
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    targets = list(wrt) if wrt is not None else list(leaves.values())
    result = {}
    for t in targets:
        g = grads.get(id(t))
        result[t] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return result


# optimizer -------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """One AdamW update in place: decoupled weight decay, bias-corrected moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        denom = np.sqrt(v) / math.sqrt(bc2) + eps
        p.data -= (lr / bc1) * m / denom
    return params
