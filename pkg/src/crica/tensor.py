"""Dense real tensors with a minimal reverse-mode autodiff engine.

A ``Tensor`` wraps a contiguous float32/float64 numpy array. While a ``Tape``
is active on the current thread, every differentiable op appends a node
(inputs, output, backward rule) to it; creation order is already a valid
topological order, so ``Tape.backward`` is a single reverse sweep. Tapes are
per-forward-pass: the node list is discarded after backward, and no
higher-order gradients are supported.

Training runs the same ops in float32; the finite-difference checks run them
in float64, where central differences are meaningful.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    EmptyTape,
    EvenKernel,
    InvalidAxis,
    NonPositiveBase,
    NonScalarOutput,
    ShapeMismatch,
)

EPS_NORM = 1e-12  # l2_normalize floor

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional real array, optionally tracked for gradients.

    Data is immutable by convention once created by an op; only ``grad``
    accumulates during a backward pass.
    """

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Accumulated gradient; reads as zeros for untouched leaves."""
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar: delegates to the module-level ops.
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered record of op nodes for one forward pass.

    Nodes are appended in creation order, which is topological by
    construction (an op's inputs exist before the op runs). ``backward``
    visits each node exactly once, in reverse, then discards the record.
    A tape and its tensors belong to one thread; distinct tapes may run in
    parallel on distinct threads.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, seed=None):
        """Seed the final node's output and sweep gradients back to leaves.

        ``seed`` must match the final node's output shape; for a scalar
        output it defaults to 1.
        """
        if not self._nodes:
            raise EmptyTape("backward on a tape with no recorded ops")
        final = self._nodes[-1].output
        if seed is None:
            if final.size != 1:
                raise ShapeMismatch("seed required for non-scalar final node")
            seed_arr = np.ones_like(final.data)
        else:
            seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=final.dtype)
            if seed_arr.shape != final.data.shape:
                raise ShapeMismatch(
                    f"seed shape {seed_arr.shape} != final node shape {final.data.shape}"
                )
        produced = {id(node.output) for node in self._nodes}
        final._grad = np.array(seed_arr, dtype=final.dtype, copy=True)
        for node in reversed(self._nodes):
            gout = node.output._grad
            if gout is None:
                continue
            grads = node.rule(gout)
            for tensor, g in zip(node.inputs, grads):
                if g is None:
                    continue
                if tensor.requires_grad or id(tensor) in produced:
                    if tensor._grad is None:
                        tensor._grad = np.array(g, dtype=tensor.dtype, copy=True)
                    else:
                        tensor._grad = tensor._grad + g
        self._nodes = []  # per-forward-pass tape; discard after backward


def backward(tape: Tape, seed=None):
    """Functional alias for ``tape.backward(seed)``."""
    tape.backward(seed)


def _record(inputs: Sequence[Tensor], output: Tensor, rule: Callable):
    tape = _active_tape()
    if tape is not None and output.requires_grad:
        tape._nodes.append(_Node(tuple(inputs), output, rule))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    _record((a, b), out, rule)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    _record((a, b), out, rule)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    _record((a, b), out, rule)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    _record((a, b), out, rule)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data, requires_grad=a.requires_grad)
    _record((a,), out, lambda g: (-g,))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad)
    mask = a.data > 0

    def rule(g):
        return (g * mask,)

    _record((a,), out, rule)
    return out


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * 0.7071067811865476))
    out = Tensor(x * cdf, requires_grad=a.requires_grad)

    def rule(g):
        pdf = np.exp(-0.5 * x * x) * 0.3989422804014327
        return (g * (cdf + x * pdf),)

    _record((a,), out, rule)
    return out


def clamp_min(a, floor: float) -> Tensor:
    """max(x, floor); subgradient passes only where x > floor."""
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, floor), requires_grad=a.requires_grad)
    mask = a.data > floor

    def rule(g):
        return (g * mask,)

    _record((a,), out, rule)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val, requires_grad=a.requires_grad)

    def rule(g):
        return (g * val,)

    _record((a,), out, rule)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonPositiveBase("log requires strictly positive input")
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad)
    ad = a.data

    def rule(g):
        return (g / ad,)

    _record((a,), out, rule)
    return out


def power(base, exponent) -> Tensor:
    """base ** exponent, differentiable in both arguments.

    A tensor (or non-integer scalar) exponent requires a strictly positive
    base, since the backward rule needs log(base).
    """
    a = _as_tensor(base)
    exp_is_tensor = isinstance(exponent, Tensor)
    e = exponent if exp_is_tensor else Tensor(np.asarray(exponent, dtype=a.dtype))
    integral = not exp_is_tensor and float(exponent) == int(exponent)
    if not integral and np.any(a.data <= 0):
        raise NonPositiveBase("power with non-integer exponent needs positive base")
    _check_broadcast(a.data, e.data, "power")
    val = a.data ** e.data
    out = Tensor(val, requires_grad=a.requires_grad or e.requires_grad)
    ad, ed = a.data, e.data

    def rule(g):
        if integral and int(ed.reshape(-1)[0] if ed.ndim else ed) == 0:
            gbase = np.zeros_like(ad)
        else:
            gbase = _unbroadcast(g * ed * ad ** (ed - 1), a.shape)
        if e.requires_grad:
            gexp = _unbroadcast(g * val * np.log(ad), e.shape)
        else:
            gexp = None
        return gbase, gexp

    _record((a, e), out, rule)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _reduce_axes(axis, ndim, op):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (_normalize_axis(axis, ndim, op),)
    return tuple(_normalize_axis(ax, ndim, op) for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _reduce_axes(axis, a.ndim, "sum")
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims), requires_grad=a.requires_grad)
    in_shape = a.shape

    def rule(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    _record((a,), out, rule)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _reduce_axes(axis, a.ndim, "mean")
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims), requires_grad=a.requires_grad)
    in_shape = a.shape
    count = a.size if axes is None else int(np.prod([in_shape[ax] for ax in axes]))

    def rule(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape) / count,)

    _record((a,), out, rule)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    in_shape = a.shape

    def rule(g):
        return (g.reshape(in_shape),)

    _record((a,), out, rule)
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), requires_grad=a.requires_grad)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (g.transpose(inverse),)

    _record((a,), out, rule)
    return out


def concat(tensors: Iterable, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat of zero tensors")
    axis = _normalize_axis(axis, ts[0].ndim, "concat")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from exc
    out = Tensor(data, requires_grad=any(t.requires_grad for t in ts))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record(tuple(ts), out, rule)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    axis = _normalize_axis(axis, a.ndim, "narrow")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeMismatch(
            f"narrow: [{start}, {start + length}) out of bounds for extent {a.shape[axis]}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim)
    )
    out = Tensor(np.ascontiguousarray(a.data[index]), requires_grad=a.requires_grad)
    in_shape = a.shape

    def rule(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    _record((a,), out, rule)
    return out


# ---------------------------------------------------------------------------
# linear algebra and fused network ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy-style stacking."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul requires tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {exc}") from exc
    out = Tensor(data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    _record((a, b), out, rule)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows along ``axis`` sum to 1."""
    a = _as_tensor(a)
    axis = _normalize_axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    val = ex / ex.sum(axis=axis, keepdims=True)
    out = Tensor(val, requires_grad=a.requires_grad)

    def rule(g):
        inner = (g * val).sum(axis=axis, keepdims=True)
        return (val * (g - inner),)

    _record((a,), out, rule)
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Variance is biased (1/n) and floored by ``eps``, so a constant row maps
    to the affine of zeros.
    """
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    dim = a.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeMismatch(
            f"layer_norm: gamma/beta must have shape ({dim},), got {gamma.shape}/{beta.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data, requires_grad=(
        a.requires_grad or gamma.requires_grad or beta.requires_grad
    ))
    gd = gamma.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        dxhat = g * gd
        ga = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return ga, ggamma, gbeta

    _record((a, gamma, beta), out, rule)
    return out


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Divide by max(l2 norm, EPS_NORM) along ``axis``."""
    a = _as_tensor(a)
    axis = _normalize_axis(axis, a.ndim, "l2_normalize")
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    clamped = np.maximum(norm, EPS_NORM)
    val = a.data / clamped
    out = Tensor(val, requires_grad=a.requires_grad)
    live = norm > EPS_NORM

    def rule(g):
        inner = (g * val).sum(axis=axis, keepdims=True)
        return ((g - val * inner * live) / clamped,)

    _record((a,), out, rule)
    return out


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1 'same' zero-padded 2-d convolution (cross-correlation).

    ``x`` is (C_in, H, W) or batched (B, C_in, H, W); the kernel is
    (C_out, C_in, kh, kw) with odd kh, kw. Output spatial extent equals the
    input's.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d: input ndim {x.ndim}, kernel ndim {kernel.ndim}")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise EvenKernel(f"conv2d kernel must be odd, got {kh}x{kw}")
    xd = x.data[None] if squeeze else x.data
    if xd.shape[1] != c_in:
        raise ShapeMismatch(f"conv2d: input channels {xd.shape[1]} != kernel {c_in}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    val = np.einsum("bchwuv,ocuv->bohw", windows, kernel.data, optimize=True)
    if bias is not None:
        val = val + bias.data[None, :, None, None]
    out_val = val[0] if squeeze else val
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(out_val, requires_grad=any(t.requires_grad for t in inputs))
    kd = kernel.data

    def rule(g):
        gb = g[None] if squeeze else g
        gkernel = np.einsum("bchwuv,bohw->ocuv", windows, gb, optimize=True)
        gpad = np.pad(gb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, (kh, kw), axis=(2, 3))
        flipped = kd[:, :, ::-1, ::-1]
        gx = np.einsum("bohwuv,ocuv->bchw", gwin, flipped, optimize=True)
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gkernel
        return gx, gkernel, gb.sum(axis=(0, 2, 3))

    _record(inputs, out, rule)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` must be a deterministic scalar-valued function of ``x``. Relative
    error per coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    Run in float64; central differences are meaningless at float32.
    """
    if not x.requires_grad:
        raise ValueError("grad_check input must have requires_grad=True")
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise NonScalarOutput(f"grad_check needs a scalar output, got shape {y.shape}")
    tape.backward(np.ones_like(y.data))
    analytic = np.array(x.grad, copy=True).reshape(-1)
    flat = x.data.flat  # .flat writes through even for non-contiguous data
    cd = np.empty(x.size, dtype=np.float64)
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        cd[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(cd)), 1e-8)
    return float(np.max(np.abs(analytic - cd) / denom))


def grad_check_many(f, params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """grad_check over several leaves of a zero-argument function ``f``."""
    worst = 0.0
    for p in params:
        worst = max(worst, grad_check(lambda _t, fn=f: fn(), p, eps=eps))
    return worst
