"""Dense float64 tensors with a reverse-mode tape.

Every op checks its output for NaN/Inf and raises ``NonFiniteError`` instead of
propagating it. Matmuls feed a single global FLOP counter (2 FLOPs per
multiply-accumulate) that is off by default.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

TANH_CLAMP = 50.0
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid static configuration (grouping, geometry, ...)."""


class InputError(ValueError):
    """Invalid runtime input such as an out-of-range token id."""


class ContractError(RuntimeError):
    """An operation was called in a mode it does not support."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# FLOP counter


class FlopCounter:
    def __init__(self) -> None:
        self.enabled = False
        self.count = 0

    def reset(self) -> None:
        self.count = 0

    def add(self, flops: int) -> None:
        if self.enabled:
            self.count += int(flops)

    @contextmanager
    def counting(self):
        """Enable counting for the block, starting from zero."""
        prev = self.enabled
        self.enabled = True
        self.reset()
        try:
            yield self
        finally:
            self.enabled = prev


flop_counter = FlopCounter()


# ---------------------------------------------------------------------------
# Tape


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class ComputeTape:
    """Ordered list of recorded operations; inputs always precede outputs."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        rec = _Record(inputs, output, backward)
        output._record = rec
        self.records.append(rec)

    def clear(self) -> None:
        for rec in self.records:
            rec.output._record = None
        self.records = []

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._record is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        stop = self.records.index(loss._record)
        for rec in reversed(self.records[: stop + 1]):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._record is None:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        self.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = ComputeTape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> ComputeTape:
    return _state.tape


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """A float64 array, optionally tracked for gradients.

    ``decay`` tags parameters for the optimizer's weight-decay split.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "decay", "_record")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        decay: bool = True,
    ) -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.decay = decay
        self._record: _Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    s = out.sum()
    if not math.isfinite(s):
        raise NonFiniteError(f"{op} produced a non-finite value")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.decay = True
    t._record = None
    track = _state.grad_enabled and any(i.requires_grad for i in inputs)
    t.requires_grad = track
    if track:
        _state.tape.record(tuple(inputs), t, backward)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward, "scale")


def elementwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"elementwise_mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "elementwise_mul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return _make(out, (x,), backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(out, (x,), backward, "permute")


def transpose_last_two(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last_two needs ndim >= 2, got {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(out, (x,), backward, "slice")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the second-to-last axis."""
    return slice_axis(x, -2, start, stop)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                "concat_last_dim: leading shapes differ: " + ", ".join(str(t.shape) for t in tensors)
            )
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tensors, backward, "concat_last_dim")


def total_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return _make(np.array([x.data.sum()]), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(total_sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    The 2-D case is the plain ``p×q @ q×s`` product.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    p, q = a.shape[-2:]
    s = b.shape[-1]
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    flop_counter.add(2 * p * q * s * math.prod(batch))

    if b.ndim == 2:
        # fold leading axes of a into one gemm
        a2 = a.data.reshape(-1, q)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (s,))

        def backward(g):
            g2 = g.reshape(-1, s)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

    else:
        out = np.matmul(a.data, b.data)

        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return ga, gb

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# Nonlinearities and normalization


def safe_tanh(x: Tensor) -> Tensor:
    """tanh with the argument clamped to [-50, 50]."""
    t = np.tanh(np.clip(x.data, -TANH_CLAMP, TANH_CLAMP))

    def backward(g):
        return (g * (1.0 - t * t),)

    return _make(t, (x,), backward, "safe_tanh")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = np.ascontiguousarray(x.data)
    flat = xd.reshape(-1, xd.shape[-1]) if xd.ndim and xd.size else xd.reshape(1, -1)
    out, th = _kernels.gelu_fwd(flat)

    def backward(g):
        gf = np.ascontiguousarray(g).reshape(flat.shape)
        return (_kernels.gelu_bwd(gf, flat, th).reshape(x.shape),)

    return _make(out.reshape(x.shape), (x,), backward, "gelu")


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row ``x / sqrt(mean(x^2) + eps) * scale`` over the last axis."""
    if eps <= 0:
        raise ConfigError("rms_norm eps must be positive")
    d = x.shape[-1]
    if scale.shape != (d,):
        raise ShapeError(f"rms_norm: scale {scale.shape} does not match last dim of {x.shape}")
    flat = np.ascontiguousarray(x.data).reshape(-1, d)
    out, xhat, inv = _kernels.rms_fwd(flat, scale.data, eps)

    def backward(g):
        gf = np.ascontiguousarray(g).reshape(-1, d)
        gx, gscale = _kernels.rms_bwd(gf, xhat, inv, scale.data)
        return gx.reshape(x.shape), (gscale if scale.requires_grad else None)

    return _make(out.reshape(x.shape), (x, scale), backward, "rms_norm")


def group_norm(
    x: Tensor,
    num_groups: int,
    affine: tuple[Tensor, Tensor] | None = None,
    eps: float = 1e-10,
) -> Tensor:
    """Normalize each contiguous group of the last axis to zero mean, unit variance."""
    d = x.shape[-1]
    if num_groups < 1 or d % num_groups:
        raise ConfigError(f"group_norm: width {d} is not divisible into {num_groups} groups")
    gsize = d // num_groups
    lead = x.shape[:-1]
    xg = x.data.reshape(lead + (num_groups, gsize))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    if affine is None:
        inputs: tuple[Tensor, ...] = (x,)
        out = xhat.reshape(x.shape)
    else:
        w, b = affine
        if w.shape != (d,) or b.shape != (d,):
            raise ShapeError(f"group_norm: affine shapes {w.shape}, {b.shape} do not match width {d}")
        inputs = (x, w, b)
        out = xhat.reshape(x.shape) * w.data + b.data

    def backward(g):
        if affine is None:
            gh = g.reshape(xhat.shape)
        else:
            gh = (g * w.data).reshape(xhat.shape)
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gx = gx.reshape(x.shape)
        if affine is None:
            return (gx,)
        flat_g = g.reshape(-1, d)
        gw = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gb = flat_g.sum(axis=0)
        return gx, gw, gb

    return _make(out, inputs, backward, "group_norm")


def softmax_last_dim(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis.

    With ``causal=True`` the last two axes are a square (query, key) grid and
    keys after the query get zero weight.
    """
    xd = x.data
    if causal:
        t = xd.shape[-1]
        if xd.shape[-2] != t:
            raise ShapeError(f"causal softmax needs square last two dims, got {x.shape}")
        p = _kernels.causal_softmax(np.ascontiguousarray(xd).reshape(-1, t, t)).reshape(x.shape)
    else:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if p.ndim >= 2:
            u = p.shape[-1]
            p3 = p.reshape(-1, p.shape[-2], u)
            return (_kernels.softmax_bwd(np.ascontiguousarray(g).reshape(p3.shape), p3).reshape(p.shape),)
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, target_ids) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    targets = np.asarray(target_ids, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise InputError(f"cross_entropy: target id out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    n = flat.shape[0]
    mx = flat.max(axis=-1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(flat - mx).sum(axis=-1))
    loss = (lse - flat[np.arange(n), t]).mean()

    def backward(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((p * (g.reshape(()) / n)).reshape(logits.shape),)

    return _make(np.array([loss]), (logits,), backward, "cross_entropy")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id out of range [0, {vocab})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), backward, "embedding_lookup")


# ---------------------------------------------------------------------------
# Gradients


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    _state.tape.backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_grad(f: Callable[[], Tensor | float], theta: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``theta`` (perturbed in place)."""
    flat = theta.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(theta.shape)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def gradcheck_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error; ``floor`` keeps all-zero gradients well conditioned."""
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))
