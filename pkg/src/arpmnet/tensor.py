"""Minimal reverse-mode tensor engine.

Only the primitives the segmentation network and discriminator need are
provided. Image tensors use the ``[batch, channels, height, width]`` layout.

Every operation returns a new :class:`Tensor`; when any operand requires a
gradient the result carries a :class:`Node` pointing back at its operands.
:func:`backward` orders those nodes into a :class:`Tape` and replays it in
reverse.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "NumericalError",
    "set_precision",
    "get_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "neg",
    "conv2d",
    "depthwise_conv2d",
    "bilinear_upsample",
    "upsample_matrix",
    "batchnorm2d",
    "relu",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "slice_channels",
    "split_channels",
    "softmax_channels",
    "channel_maxpool3d",
    "sum",
    "mean",
    "safe_log",
    "backward",
    "grad_check",
]

SAFE_LOG_FLOOR = 1e-12

_DTYPE = np.float64
_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)
_CHECK_FINITE = True


class NumericalError(FloatingPointError):
    """A NaN or infinity appeared in a tensor operation."""


def set_precision(name: str) -> None:
    """Select the global float precision ("float64" or "float32")."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision {name!r}")
    _DTYPE = np.dtype(name).type


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = np.dtype(_DTYPE).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


_BRANCHES: contextvars.ContextVar[list | None] = contextvars.ContextVar("branches", default=None)


@contextlib.contextmanager
def record_branches() -> Iterator[list[np.ndarray]]:
    """Collect the branch taken by every piecewise op (relu masks, max-pool
    argmaxes, clamps) evaluated inside the block, in call order."""
    log: list[np.ndarray] = []
    token = _BRANCHES.set(log)
    try:
        yield log
    finally:
        _BRANCHES.reset(token)


def _branch(choice: np.ndarray) -> None:
    log = _BRANCHES.get()
    if log is not None:
        log.append(choice)


@dataclass(eq=False)
class Node:
    """One primitive application: operands plus the local vector-Jacobian product."""

    op: str
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
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

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no gradient history (shares storage)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.node = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a [B,C,H,W] tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may broadcast (e.g. ``[B,1,H,W]`` across channels)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, "mul", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``x`` is ``[B,Cin,H,W]``, ``weight`` is ``[Cout,Cin,k,k]`` and ``bias`` is
    ``[Cout]``. The output is ``[B,Cout,H',W']`` with
    ``H' = floor((H + 2p - d(k-1) - 1)/s) + 1``.
    """
    _check_nchw(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d kernel must be [Cout,Cin,k,k], got {weight.shape}")
    B, cin, H, W = x.shape
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    ho = conv_output_size(H, k, stride, dilation, padding)
    wo = conv_output_size(W, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: empty output for input {x.shape} and kernel {weight.shape}")

    ext = (k - 1) * dilation + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (ext, ext), axis=(2, 3))[:, :, ::stride, ::stride, ::dilation, ::dilation]
    # columns laid out [Cin,k,k,B,Ho,Wo]: the copy reads rows contiguously
    cols = np.ascontiguousarray(win[:, :, :ho, :wo].transpose(1, 4, 5, 0, 2, 3)).reshape(cin * k * k, -1)
    w2 = weight.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, B, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def vjp(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, k, k, B, ho, wo)
            gxp = np.zeros((cin, B) + xp.shape[2:], dtype=g.dtype)
            hs = stride * (ho - 1) + 1
            ws = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    r, c = i * dilation, j * dilation
                    gxp[:, :, r : r + hs : stride, c : c + ws : stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + H, padding : padding + W]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", inputs, vjp)


def depthwise_conv2d(x: Tensor, weight: Tensor, dilation: int = 1, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation, stride 1. ``weight`` is ``[C,k,k]``."""
    _check_nchw(x, "depthwise_conv2d")
    B, C, H, W = x.shape
    if weight.ndim != 3 or weight.shape[0] != C or weight.shape[1] != weight.shape[2]:
        raise ValueError(f"depthwise_conv2d kernel must be [{C},k,k], got {weight.shape}")
    k = weight.shape[1]
    ho = conv_output_size(H, k, 1, dilation, padding)
    wo = conv_output_size(W, k, 1, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError("depthwise_conv2d: empty output")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    w = weight.data
    out = np.zeros((B, C, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            r, c = i * dilation, j * dilation
            out += xp[:, :, r : r + ho, c : c + wo] * w[None, :, i, j, None, None]

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    r, c = i * dilation, j * dilation
                    gxp[:, :, r : r + ho, c : c + wo] += g * w[None, :, i, j, None, None]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if weight.requires_grad:
            gw = np.empty_like(w)
            for i in range(k):
                for j in range(k):
                    r, c = i * dilation, j * dilation
                    gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, r : r + ho, c : c + wo])
        return gx, gw

    return _result(out, "depthwise_conv2d", (x, weight), vjp)


# ---------------------------------------------------------------------------
# resampling


def upsample_matrix(size: int, factor: int, dtype=None) -> np.ndarray:
    """Linear-interpolation matrix ``[size*factor, size]`` with half-pixel centres.

    Output index ``o`` samples input coordinate ``(o + 0.5)/factor - 0.5``,
    clamped to ``[0, size-1]``.
    """
    n_out = size * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    m = np.zeros((n_out, size), dtype=dtype or _DTYPE)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    _check_nchw(x, "bilinear_upsample")
    if factor < 1:
        raise ValueError("bilinear_upsample factor must be >= 1")
    if factor == 1:
        return _result(x.data.copy(), "bilinear_upsample", (x,), lambda g: (g,))
    _, _, H, W = x.shape
    uh = upsample_matrix(H, factor, x.dtype)
    uw = upsample_matrix(W, factor, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return _result(out, "bilinear_upsample", (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


# ---------------------------------------------------------------------------
# normalisation and activations


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor | None,
    running_var: Tensor | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    In training mode the running statistics are updated in place as
    ``running <- (1 - momentum) * running + momentum * batch`` (biased batch
    variance).
    """
    _check_nchw(x, "batchnorm2d")
    if eps <= 0:
        raise ValueError("batchnorm2d eps must be positive")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm2d: gamma/beta must have shape ({C},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        if running_mean is not None and running_var is not None:
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm2d: inference mode requires initialised running statistics")
        mu = running_mean.data
        var = running_var.data
        xc = xd - mu[None, :, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv)[None, :, None, None]
            if training:
                gx = scale * (g - gbeta[None, :, None, None] / n - xhat * (ggamma / n)[None, :, None, None])
            else:
                gx = scale * g
        return gx, ggamma, gbeta

    return _result(out, "batchnorm2d", (x, gamma, beta), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _branch(mask)
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0 <= alpha < 1:
        raise ValueError("leaky_relu alpha must lie in [0, 1)")
    mask = x.data > 0
    _branch(mask)
    slope = np.where(mask, 1.0, alpha).astype(x.dtype, copy=False)
    return _result(x.data * slope, "leaky_relu", (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, saturating at machine epsilon instead of exactly 0 or 1."""
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    tiny = np.finfo(x.dtype).eps
    _branch((s <= tiny) | (s >= 1.0 - tiny))
    s = np.clip(s, tiny, 1.0 - tiny)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    for p in parts:
        _check_nchw(p, "concat_channels")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: mismatched shapes {ref} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(out, "concat_channels", tuple(parts), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_nchw(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for {x.shape[1]} channels")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), "slice_channels", (x,), vjp)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[1]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_channels(x, start, start + n))
        start += n
    return out


def softmax_channels(x: Tensor) -> Tensor:
    _check_nchw(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, "softmax_channels", (x,), vjp)


def channel_maxpool3d(x: Tensor, window: tuple[int, int, int] = (3, 3, 3)) -> Tensor:
    """Stride-1 max over a (channel, height, width) neighbourhood.

    Borders are replicate-padded on all three axes so the output keeps the
    input shape. Gradients go to the first maximal cell in scan order.
    """
    _check_nchw(x, "channel_maxpool3d")
    wc, wh, ww = window
    if any(w < 1 or w % 2 == 0 for w in window):
        raise ValueError(f"channel_maxpool3d window must be odd and positive, got {window}")
    B, C, H, W = x.shape
    rc, rh, rw = wc // 2, wh // 2, ww // 2
    xp = np.pad(x.data, ((0, 0), (rc, rc), (rh, rh), (rw, rw)), mode="edge")
    win = sliding_window_view(xp, (wc, wh, ww), axis=(1, 2, 3)).reshape(B, C, H, W, wc * wh * ww)
    arg = win.argmax(axis=-1)
    _branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        dc, rem = np.divmod(arg, wh * ww)
        dh, dw = np.divmod(rem, ww)
        cc = np.clip(np.arange(C)[None, :, None, None] + dc - rc, 0, C - 1)
        hh = np.clip(np.arange(H)[None, None, :, None] + dh - rh, 0, H - 1)
        ww_ = np.clip(np.arange(W)[None, None, None, :] + dw - rw, 0, W - 1)
        bb = np.broadcast_to(np.arange(B)[:, None, None, None], arg.shape)
        flat = ((bb * C + cc) * H + hh) * W + ww_
        gx = np.bincount(flat.ravel(), weights=g.ravel(), minlength=x.size)
        return (gx.reshape(x.shape).astype(g.dtype, copy=False),)

    return _result(np.ascontiguousarray(out), "channel_maxpool3d", (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.broadcast_to(g / n, shape),))


def safe_log(x: Tensor, floor: float = SAFE_LOG_FLOOR) -> Tensor:
    """``ln(max(x, floor))``; the clamped region has zero gradient."""
    if floor <= 0:
        raise ValueError("safe_log floor must be positive")
    xd = x.data
    live = xd > floor
    _branch(live)
    out = np.log(np.maximum(xd, floor))

    def vjp(g):
        return (np.where(live, g / np.where(live, xd, 1.0), 0.0).astype(g.dtype, copy=False),)

    return _result(out, "safe_log", (x,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class Tape:
    """Nodes of one computation in topological order (operands before results)."""

    tensors: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.inputs:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __contains__(self, t: Tensor) -> bool:
        return any(x is t for x in self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every tensor on the tape.

    Gradients are added to any existing ``grad``; two calls without clearing
    therefore double them.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    elif not tape.tensors or tape.tensors[-1] is not loss:
        raise ValueError("tape does not record the provenance of this loss")
    if not loss.requires_grad:
        return tape
    members = {id(t) for t in tape.tensors}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = np.array(g, dtype=t.dtype) if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) not in members:
                raise ValueError(f"tape is missing the operand of {t.node.op}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return tape


def probe_coords(size: int, max_coords: int | None, seed: int) -> np.ndarray:
    """Coordinates :func:`grad_check` perturbs: all of them, or a seeded subset."""
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.random.default_rng(seed).choice(size, size=max_coords, replace=False)


def branch_stable(
    f: Callable[[Tensor], Tensor], point: Tensor, h: float, max_coords: int | None = None, seed: int = 0
) -> bool:
    """True when every piecewise op in ``f`` takes the same branch at ``point``
    and at each probed ``point +- h e_i`` (same coordinates as :func:`grad_check`).

    Central differences across a kink measure a secant, not the derivative;
    this identifies check points where that happens.
    """
    point.data = np.ascontiguousarray(point.data)
    flat = point.data.reshape(-1)

    def pattern():
        with no_grad(), record_branches() as log:
            f(point)
        return log

    base = pattern()
    for i in probe_coords(flat.size, max_coords, seed):
        orig = flat[i]
        for step in (h, -h):
            flat[i] = orig + step
            moved = pattern()
            flat[i] = orig
            if len(moved) != len(base) or any(not np.array_equal(a, b) for a, b in zip(base, moved)):
                return False
    return True


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error for coordinate ``i`` is ``|a - n| / max(1, |a|, |n|)``. ``f`` is
    evaluated at ``point`` with ``point.data`` perturbed in place. With
    ``max_coords`` only a random subset of coordinates is probed.
    """
    if point.dtype != np.float64:
        raise ValueError("grad_check requires 64-bit tensors")
    if not 1e-5 <= h <= 1e-2:
        raise ValueError("grad_check step must lie in [1e-5, 1e-2]")
    point.data = np.ascontiguousarray(point.data)
    was = point.requires_grad
    point.requires_grad = True
    point.grad = None
    out = f(point)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros(point.shape) if point.grad is None else point.grad.copy()
    point.grad = None
    point.requires_grad = was

    flat = point.data.reshape(-1)
    coords = probe_coords(flat.size, max_coords, seed)
    worst = 0.0
    a_flat = analytic.reshape(-1)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(point).item()
            flat[i] = orig - h
            fm = f(point).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = a_flat[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if math.isnan(err):
                return float("nan")
            worst = max(worst, err)
    return worst
