"""Reverse-mode tensor numerics.

Dense numpy buffers with a dynamic tape: every operation links its output to
its inputs through a vector-Jacobian closure, and ``Tensor.backward`` replays
the tape in reverse topological order.  Training arithmetic runs in float32;
float64 inputs stay float64 end to end so gradients can be validated against
central differences.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
MASK_BIAS = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class GraphError(RuntimeError):
    """The computation record is malformed (e.g. contains a cycle)."""


_GRAD_MODE = [True]


@contextmanager
def no_grad():
    """Disable tape recording within the block (inference / oracle paths)."""
    previous = _GRAD_MODE[0]
    _GRAD_MODE[0] = False
    try:
        yield
    finally:
        _GRAD_MODE[0] = previous


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- construction of op outputs -------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_MODE[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return mul(tensor_sum(self), 1.0 / self.data.size)

    # -- reverse pass ------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this (scalar) tensor into leaf ``.grad``s."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError(f"backward() on non-scalar shape {self.shape} needs an explicit seed")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} does not match tensor shape {self.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    held = grads.get(id(parent))
                    grads[id(parent)] = pg if held is None else held + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; a back edge to an in-progress node means the record
    # has a cycle, which only a bug in op construction could produce.
    VISITING, DONE = 0, 1
    state: dict[int, int] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, edge = stack.pop()
        if edge == 0:
            st = state.get(id(node))
            if st == DONE:
                continue
            if st == VISITING:
                raise GraphError("cycle in computation record")
            state[id(node)] = VISITING
        if edge < len(node._parents):
            stack.append((node, edge + 1))
            parent = node._parents[edge]
            st = state.get(id(parent))
            if st is None:
                stack.append((parent, 0))
            elif st == VISITING:
                raise GraphError("cycle in computation record")
        else:
            state[id(node)] = DONE
            order.append(node)
    return order


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._result(data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or batched operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes do not align: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return Tensor._result(data, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.data.shape
    data = a.data.reshape(shape)
    return Tensor._result(data, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    data = a.data.transpose(axes)
    return Tensor._result(data, (a,), lambda g: (g.transpose(inverse),))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for shape {a.shape}")
    data = a.data[start:stop]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return Tensor._result(data, (a,), vjp)


def tensor_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype).reshape(())
    return Tensor._result(data, (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis of a 2-d input."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    data = x.data @ w.data + b.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._result(data, (x, w, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return Tensor._result(data.astype(x.dtype, copy=False), (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; rejects non-finite input."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return Tensor._result(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} incompatible with input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor._result(data, (x, gain, bias), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    total = exps.sum(axis=-1, keepdims=True)
    log_z = np.log(total)
    picked = shifted[np.arange(n), labels, None]
    data = np.asarray((log_z - picked).mean(), dtype=logits.dtype).reshape(())

    def vjp(g):
        probs = exps / total
        probs[np.arange(n), labels] -= 1.0
        return (probs * (g / n),)

    return Tensor._result(data, (logits,), vjp)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention block."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


def masked_attention(x: Tensor, mask: np.ndarray, params: AttentionParams, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a boolean visibility mask.

    ``mask[i, j]`` True means token i may attend to token j.  Forbidden
    positions receive an additive bias of -1e9 before the softmax, which
    underflows to exactly zero weight.
    """
    n, width = x.shape
    if width % heads != 0:
        raise ShapeError(f"embedding width {width} is not divisible by {heads} heads")
    mask = np.asarray(mask)
    if mask.dtype != np.bool_ or mask.shape != (n, n):
        raise ShapeError(f"mask must be bool of shape {(n, n)}, got {mask.dtype} {mask.shape}")
    attendable = mask.any(axis=1)
    if not attendable.all():
        bad = int(np.flatnonzero(~attendable)[0])
        raise ValueError(f"attention mask row {bad} has no attendable positions")

    head_dim = width // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, heads, head_dim)), (1, 0, 2))

    q = split(linear(x, params.wq, params.bq))
    k = split(linear(x, params.wk, params.bk))
    v = split(linear(x, params.wv, params.bv))

    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(head_dim))
    bias = np.where(mask, 0.0, MASK_BIAS).astype(x.dtype)[None, :, :]
    weights = softmax(add(scores, Tensor(bias)))
    mixed = matmul(weights, v)
    merged = reshape(transpose(mixed, (1, 0, 2)), (n, width))
    return linear(merged, params.wo, params.bo)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Exponential moment estimates for one parameter list."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, in place.

    The whole step is rejected (no parameter or state mutation) if any
    gradient is non-finite or shaped wrong.
    """
    if len(params) != len(state.first_moment):
        raise ShapeError(
            f"optimizer state holds {len(state.first_moment)} slots for {len(params)} params"
        )
    if len(grads) != len(params):
        raise ShapeError(f"got {len(grads)} gradients for {len(params)} params")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"missing gradient for parameter {i}")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient {i} shape {g.shape} does not match parameter {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {i}; step rejected")

    t = state.step_count + 1
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    state.step_count = t
    return params, state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 to 0 across total_steps, no warmup."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > total_steps:
        warnings.warn(f"cosine_lr called past the schedule ({step} > {total_steps}); clamping to 0")
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
