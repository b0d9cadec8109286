"""Dense tensors with tape-based reverse-mode differentiation.

Every op computes its forward value with numpy, checks it is finite and, when
any input requires a gradient, records a node on the active :class:`Tape`.
:func:`backward` replays the tape in reverse and clears it.

Arrays are channel-first (``B x C x H x W``) wherever spatial ops are involved.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_dtype: type = np.float32
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class UsageError(RuntimeError):
    pass


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Gradient checks run under ``precision(np.float64)`` so finite differences
    are not swamped by f32 rounding.
    """
    global _dtype
    previous, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


def default_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

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
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes)

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return mean(self)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(Node(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``; clears the tape."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _tape.nodes:
        raise UsageError("backward called on an empty tape")
    produced = {id(node.output) for node in _tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    try:
        for node in reversed(_tape.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
    finally:
        _tape.clear()


# ---------------------------------------------------------------- elementwise


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0, dtype=np.float64).astype(g.dtype) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may be a trailing-dim bias of ``a``."""
    if a.shape != b.shape and not _bias_compatible(a, b):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _bias_compatible(a, b):
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} are incompatible")
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _bias_compatible(a, b):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)
    return _result("scale", a.data * c_arr, (a,), lambda g: (g * c_arr,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = (xd * cdf).astype(xd.dtype)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return _result("gelu", out, (x,), back)


# ------------------------------------------------------------------ reductions


def tsum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    shape, dt = x.shape, x.data.dtype
    return _result("sum", total, (x,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all elements, or over a single ``axis``."""
    dt = x.data.dtype
    if axis is None:
        n = x.size
        val = np.asarray(x.data.mean(dtype=np.float64), dtype=dt)
        shape = x.shape
        return _result("mean", val, (x,), lambda g: (np.full(shape, g / n, dtype=dt),))
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    val = x.data.mean(axis=axis, dtype=np.float64).astype(dt)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).astype(dt),)

    return _result("mean_axis", val, (x,), back)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ----------------------------------------------------------------- structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    axis = _check_axis(axis, xs[0].ndim)
    sizes = [t.shape[axis] for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum(sizes)[:-1]
    return _result("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


# -------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` is either 2-d (applied to the last axis of ``a``) or has the same
    leading dims as ``a`` (batched product).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    if bd.ndim == 2:
        def back(g):
            k, n = bd.shape
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def back(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result("matmul", out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``in x out``."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation of ``x`` (B x C x H x W) with ``w`` (O x C/groups x kh x kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if groups < 1 or c % groups or o % groups or cg != c // groups:
        raise DimensionError(f"conv2d: channels {c}/{o} incompatible with kernel {w.shape} and groups={groups}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({o},)")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wdat = w.data
    dt = x.data.dtype

    depthwise = groups == c and o == c
    if depthwise:
        out = np.zeros((bsz, c, ho, wo), dtype=dt)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out += win * wdat[None, :, 0, i, j, None, None]
    else:
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        og = o // groups
        parts = []
        for gi in range(groups):
            wsub = wdat[gi * og:(gi + 1) * og]
            win = windows[:, gi * cg:(gi + 1) * cg]
            parts.append(np.tensordot(win, wsub, axes=([1, 4, 5], [1, 2, 3])))
        out = np.concatenate(parts, axis=-1).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out, dtype=dt)
    if b is not None:
        out += b.data[None, :, None, None]

    def back(g):
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros_like(wdat)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                    gxp[sl] += g * wdat[None, :, 0, i, j, None, None]
        else:
            og = o // groups
            gws = []
            for gi in range(groups):
                gsub = g[:, gi * og:(gi + 1) * og]
                wsub = wdat[gi * og:(gi + 1) * og]
                win = windows[:, gi * cg:(gi + 1) * cg]
                gws.append(np.tensordot(gsub, win, axes=([0, 2, 3], [0, 2, 3])))
                cols = np.tensordot(gsub, wsub, axes=([1], [0]))  # B x Ho x Wo x Cg x kh x kw
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, gi * cg:(gi + 1) * cg, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            cols[..., i, j].transpose(0, 3, 1, 2)
            gw = np.concatenate(gws, axis=0).astype(dt)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _result("conv2d", out, inputs, back)


# -------------------------------------------------------------- normalisers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), back)


def layernorm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
              eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    wd = weight.data if weight is not None else None
    out = xhat * wd if wd is not None else xhat.copy()
    if bias is not None:
        out = out + bias.data

    def back(g):
        gh = g * wd if wd is not None else g
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        lead = (-1, n)
        if weight is not None:
            grads.append((g * xhat).reshape(lead).sum(axis=0, dtype=np.float64).astype(xd.dtype))
        if bias is not None:
            grads.append(g.reshape(lead).sum(axis=0, dtype=np.float64).astype(xd.dtype))
        return grads

    inputs = tuple(t for t in (x, weight, bias) if t is not None)
    return _result("layernorm", out, inputs, back)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixelwise cross-entropy; ``logits`` is B x S x H x W, ``labels`` B x H x W."""
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    ld = logits.data
    dt = ld.dtype
    s = ld.shape[1]
    valid = labels != ignore_index
    if np.any(labels[valid] >= s) or np.any(labels[valid] < 0):
        raise DimensionError("cross_entropy: label outside class range")
    n_valid = int(valid.sum())
    safe = np.where(valid, labels, 0)
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    total = -(picked * valid).sum(dtype=np.float64)
    loss = np.asarray(total / max(n_valid, 1), dtype=dt)

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        gl = (p - onehot) * valid[:, None] * (g / max(n_valid, 1))
        return (gl.astype(dt),)

    return _result("cross_entropy", loss, (logits,), back)


# ------------------------------------------------------------- resampling


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel bilinear interpolation weights (``n_out x n_in``)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale_ = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinearly resample the last two axes of ``x`` to ``size``."""
    h, w = x.shape[-2:]
    ho, wo = size
    if (h, w) == (ho, wo):
        return x
    dt = x.data.dtype
    ah = interp_matrix(ho, h).astype(dt)
    aw = interp_matrix(wo, w).astype(dt)
    out = ah @ x.data @ aw.T

    def back(g):
        return (ah.T @ g @ aw,)

    return _result("resize_bilinear", out, (x,), back)


def parameter(data, dtype=None) -> Tensor:
    t = Tensor(np.asarray(data, dtype=dtype or _dtype), requires_grad=True)
    return t
