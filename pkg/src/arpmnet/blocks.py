"""Segmentation network (S-net) and per-pixel discriminator (D-net).

Networks are pure forward functions over a :class:`NetParams` mapping. Keys
are hierarchical paths such as ``enc0.multires.stage1.conv.weight``; the
parameter set is created once by :func:`init_params` and never grows.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

SEGMENTATION = "segmentation"
DISCRIMINATOR = "discriminator"

BN_MOMENTUM = 0.1
_bn_momentum: ContextVar[float] = ContextVar("bn_momentum", default=BN_MOMENTUM)
BN_EPS = 1e-5
RUNNING_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class MRFConfig:
    local_kernel: int = 9
    local_dilations: tuple[int, int] = (1, 2)
    pool_window: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.local_kernel < 1 or self.local_kernel % 2 == 0:
            raise ValueError(f"MRF local_kernel must be odd, got {self.local_kernel}")
        d1, d2 = self.local_dilations
        if d1 < 1 or d2 < 1 or d1 == d2:
            raise ValueError(f"MRF dilations must be distinct positive integers, got {self.local_dilations}")
        if any(w < 1 or w % 2 == 0 for w in self.pool_window):
            raise ValueError(f"MRF pool window must be odd, got {self.pool_window}")


@dataclass(frozen=True)
class SNetConfig:
    levels: int = 4
    base_channels: int = 16
    num_classes: int = 6
    input_channels: int = 1
    mrf: MRFConfig = field(default_factory=MRFConfig)
    # fixed input affine (x - mean) / std; centres the phantom intensity range
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("S-net needs at least 2 levels")
        # level 0 runs a multi-residual block of base_channels (needs >= 16) and a
        # multi-scale pool that splits channels four ways
        if self.base_channels < 16 or self.base_channels % 4:
            raise ValueError("base_channels must be >= 16 and divisible by 4")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_channels != 1:
            raise ValueError("S-net takes single-channel images")
        if not (self.input_std > 0 and np.isfinite(self.input_std) and np.isfinite(self.input_mean)):
            raise ValueError("input_std must be positive and input_mean finite")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


@dataclass(frozen=True)
class DNetConfig:
    in_channels: int = 6
    channels: tuple[int, ...] = (32, 64, 128, 256)
    kernel: int = 4
    stride: int = 2
    leaky_slope: float = 0.2

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError("D-net has exactly four down-sampling layers")

    @property
    def downsample(self) -> int:
        return self.stride ** len(self.channels)


class NetParams:
    """Fixed, named collection of tensors for one network."""

    def __init__(self, role: str, tensors: dict[str, Tensor]):
        if role not in (SEGMENTATION, DISCRIMINATOR):
            raise ValueError(f"unknown network role {role!r}")
        self.role = role
        self._tensors = dict(tensors)

    def __getitem__(self, key: str) -> Tensor:
        try:
            return self._tensors[key]
        except KeyError:
            raise KeyError(f"{self.role} network has no parameter {key!r}") from None

    def __setitem__(self, key: str, value: Tensor) -> None:
        old = self[key]
        if value.shape != old.shape:
            raise ValueError(f"{key}: shape {value.shape} does not match {old.shape}")
        self._tensors[key] = value

    def get(self, key: str) -> Tensor | None:
        return self._tensors.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def keys(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def detached(self) -> "NetParams":
        """View with gradients switched off; values are shared, not copied."""
        return NetParams(self.role, {k: t.detach() for k, t in self._tensors.items()})

    def copy(self) -> "NetParams":
        return NetParams(
            self.role,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype) for k, t in self._tensors.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        unknown = set(arrays) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown tensor keys: {sorted(unknown)}")
        missing = set(self._tensors) - set(arrays)
        if missing:
            raise KeyError(f"missing tensor keys: {sorted(missing)}")
        for k, arr in arrays.items():
            t = self._tensors[k]
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)


# ---------------------------------------------------------------------------
# parameter layout


def multires_widths(cout: int) -> tuple[int, int, int]:
    """Split ``cout`` in ratio 3:5:8; the first two shares are floored."""
    if cout < 16:
        raise ValueError(f"multi-residual block needs at least 16 output channels, got {cout}")
    a = 3 * cout // 16
    b = 5 * cout // 16
    return a, b, cout - a - b


def residual_units(level: int) -> int:
    return max(1, 4 - level)


class _Layout:
    """Collects ``key -> (shape, kind)`` in wiring order."""

    def __init__(self):
        self.entries: dict[str, tuple[tuple[int, ...], str]] = {}

    def conv(self, prefix: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
        self.entries[f"{prefix}.weight"] = ((cout, cin, k, k), "kernel")
        if bias:
            self.entries[f"{prefix}.bias"] = ((cout,), "zero")

    def bn(self, prefix: str, c: int) -> None:
        self.entries[f"{prefix}.gamma"] = ((c,), "one")
        self.entries[f"{prefix}.beta"] = ((c,), "zero")
        self.entries[f"{prefix}.running_mean"] = ((c,), "running_zero")
        self.entries[f"{prefix}.running_var"] = ((c,), "running_one")

    def add(self, key: str, shape: tuple[int, ...], kind: str) -> None:
        self.entries[key] = (shape, kind)

    def conv_bn(self, prefix: str, cin: int, cout: int) -> None:
        self.conv(f"{prefix}.conv", cin, cout, 3)
        self.bn(f"{prefix}.bn", cout)

    def multires(self, prefix: str, cin: int, cout: int) -> None:
        prev = cin
        for i, w in enumerate(multires_widths(cout), start=1):
            self.conv_bn(f"{prefix}.stage{i}", prev, w)
            self.conv(f"{prefix}.stage{i}.proj", prev, w, 1)
            prev = w

    def multiscale(self, prefix: str, c: int) -> None:
        for d in MULTISCALE_DILATIONS:
            self.conv(f"{prefix}.branch{d}", c, c // 4, 3)
        self.conv_bn(f"{prefix}.fuse", c, c)

    def residual_path(self, prefix: str, c: int, units: int) -> None:
        for u in range(units):
            self.conv_bn(f"{prefix}.unit{u}", c, c)
            self.conv(f"{prefix}.unit{u}.proj", c, c, 1)

    def mrf(self, prefix: str, c: int, cfg: MRFConfig) -> None:
        for i in range(len(cfg.local_dilations)):
            self.add(f"{prefix}.local{i}.weight", (c, cfg.local_kernel, cfg.local_kernel), "local")
        self.add(f"{prefix}.global.weight", (c, c, 1, 1), "zero")
        self.add(f"{prefix}.global.bias", (c,), "zero")


MULTISCALE_DILATIONS = (1, 2, 3, 4)


def snet_layout(cfg: SNetConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    lay = _Layout()
    cin = cfg.input_channels
    for lvl in range(cfg.levels):
        c = cfg.channels(lvl)
        lay.multires(f"enc{lvl}.multires", cin, c)
        if lvl < cfg.levels - 1:
            lay.multiscale(f"enc{lvl}.pool", c)
        cin = c
    for lvl in reversed(range(cfg.levels - 1)):
        c = cfg.channels(lvl)
        lay.conv(f"dec{lvl}.up", cfg.channels(lvl + 1), c, 3)
        lay.residual_path(f"skip{lvl}", c, residual_units(lvl))
        lay.multires(f"dec{lvl}.multires", 2 * c, c)
    lay.conv("head", cfg.channels(0), cfg.num_classes, 1)
    lay.mrf("mrf", cfg.num_classes, cfg.mrf)
    return lay.entries


def dnet_layout(cfg: DNetConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    lay = _Layout()
    cin = cfg.in_channels
    for i, c in enumerate(cfg.channels):
        lay.conv(f"down{i}", cin, c, cfg.kernel)
        cin = c
    lay.conv("classify", cin, 1, 1)
    return lay.entries


def init_params(cfg: SNetConfig | DNetConfig, seed: int) -> NetParams:
    """Deterministic initialisation.

    Kernels are He-uniform in their fan-in, biases zero, batch norm at the
    identity (gamma 1, beta 0, running mean 0, running var 1). The MRF class
    mixing convolution starts at zero, so the MRF block is the identity at
    step 0; its local filters are random so that gradients can reach both.
    """
    if isinstance(cfg, SNetConfig):
        role, layout = SEGMENTATION, snet_layout(cfg)
    elif isinstance(cfg, DNetConfig):
        role, layout = DISCRIMINATOR, dnet_layout(cfg)
    else:
        raise TypeError(f"unsupported config {type(cfg).__name__}")
    rng = np.random.default_rng(seed)
    dtype = T.get_dtype()
    tensors = {}
    for key, (shape, kind) in layout.items():
        if kind in ("kernel", "local"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind in ("one", "running_one"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[key] = Tensor(arr.astype(dtype), requires_grad=not kind.startswith("running"))
    return NetParams(role, tensors)


# ---------------------------------------------------------------------------
# building blocks


@contextmanager
def bn_momentum(value: float) -> Iterator[None]:
    """Temporarily override the running-statistics momentum of every batch norm."""
    if not 0.0 < value <= 1.0:
        raise ValueError("batch-norm momentum must lie in (0, 1]")
    token = _bn_momentum.set(value)
    try:
        yield
    finally:
        _bn_momentum.reset(token)


def _conv(x: Tensor, params: NetParams, prefix: str, **kw) -> Tensor:
    return T.conv2d(x, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"), **kw)


def _bn(x: Tensor, params: NetParams, prefix: str, training: bool) -> Tensor:
    return T.batchnorm2d(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params[f"{prefix}.running_mean"],
        params[f"{prefix}.running_var"],
        training=training,
        momentum=_bn_momentum.get(),
        eps=BN_EPS,
    )


def _residual_unit(x: Tensor, params: NetParams, prefix: str, training: bool) -> Tensor:
    # relu(bn(conv3x3(x)) + conv1x1(x))
    h = _bn(_conv(x, params, f"{prefix}.conv", padding=1), params, f"{prefix}.bn", training)
    return T.relu(h + _conv(x, params, f"{prefix}.proj"))


def multires_block(x: Tensor, params: NetParams, prefix: str, cout: int, training: bool = True) -> Tensor:
    """Three chained 3x3 residual stages of widths 3:5:8, concatenated."""
    widths = multires_widths(cout)
    stages = []
    h = x
    for i in range(1, len(widths) + 1):
        h = _residual_unit(h, params, f"{prefix}.stage{i}", training)
        stages.append(h)
    return T.concat_channels(stages)


def multiscale_pool(x: Tensor, params: NetParams, prefix: str, training: bool = True) -> Tensor:
    """Halve the spatial size with four stride-2 dilated 3x3 branches."""
    _, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"multiscale_pool needs even spatial dims, got {h}x{w}")
    if c % 4:
        raise ValueError(f"multiscale_pool needs channels divisible by 4, got {c}")
    branches = [
        _conv(x, params, f"{prefix}.branch{d}", stride=2, dilation=d, padding=d) for d in MULTISCALE_DILATIONS
    ]
    h = T.concat_channels(branches)
    h = _bn(_conv(h, params, f"{prefix}.fuse.conv", padding=1), params, f"{prefix}.fuse.bn", training)
    return T.relu(h)


def residual_forward_path(
    skip: Tensor, params: NetParams, prefix: str, units: int, training: bool = True
) -> Tensor:
    if units < 1:
        raise ValueError("residual path needs at least one unit")
    h = skip
    for u in range(units):
        h = _residual_unit(h, params, f"{prefix}.unit{u}", training)
    return h


def mrf_block(unary: Tensor, params: NetParams, prefix: str, cfg: MRFConfig) -> Tensor:
    """Refine logits by subtracting a pairwise penalty computed from their softmax.

    The penalty is a 3-D max-pool of a class-mixing 1x1 convolution applied to
    the sum of two depthwise local filters run at different dilations.
    """
    c = unary.shape[1]
    w0 = params[f"{prefix}.local0.weight"]
    if w0.shape[0] != c:
        raise ValueError(f"MRF block built for {w0.shape[0]} classes, got {c}")
    q = T.softmax_channels(unary)
    k = cfg.local_kernel
    local = None
    for i, d in enumerate(cfg.local_dilations):
        term = T.depthwise_conv2d(q, params[f"{prefix}.local{i}.weight"], dilation=d, padding=d * (k // 2))
        local = term if local is None else local + term
    mixed = _conv(local, params, f"{prefix}.global")
    pairwise = T.channel_maxpool3d(mixed, cfg.pool_window)
    return unary - pairwise


def mrf_local_param_counts(full_kernel: int, classes: int) -> tuple[int, int]:
    """Parameter counts of (two parallel half-extent filters, one full filter).

    The pair uses ``ceil(k/2) x ceil(k/2)`` taps each. For ``k = 50`` and 3
    classes that is 3750 against 7500.
    """
    half = -(-full_kernel // 2)
    return 2 * half * half * classes, full_kernel * full_kernel * classes


# ---------------------------------------------------------------------------
# networks


def snet_forward(image: Tensor, params: NetParams, cfg: SNetConfig, training: bool = True) -> Tensor:
    """Logits ``[B, num_classes, H, W]`` for a ``[B, 1, H, W]`` image batch."""
    T._check_nchw(image, "snet_forward")
    _, cin, h, w = image.shape
    if cin != cfg.input_channels:
        raise ValueError(f"S-net expects {cfg.input_channels} input channel(s), got {cin}")
    div = 2 ** (cfg.levels - 1)
    if h % div or w % div:
        raise ValueError(f"image {h}x{w} not divisible by {div}")

    skips = []
    x = (image - cfg.input_mean) * (1.0 / cfg.input_std)
    for lvl in range(cfg.levels):
        f = multires_block(x, params, f"enc{lvl}.multires", cfg.channels(lvl), training)
        if lvl < cfg.levels - 1:
            skips.append(f)
            x = multiscale_pool(f, params, f"enc{lvl}.pool", training)
        else:
            x = f
    for lvl in reversed(range(cfg.levels - 1)):
        x = _conv(T.bilinear_upsample(x, 2), params, f"dec{lvl}.up", padding=1)
        r = residual_forward_path(skips[lvl], params, f"skip{lvl}", residual_units(lvl), training)
        x = multires_block(T.concat_channels([x, r]), params, f"dec{lvl}.multires", cfg.channels(lvl), training)
    logits = _conv(x, params, "head")
    return mrf_block(logits, params, "mrf", cfg.mrf)


def dnet_forward(product: Tensor, params: NetParams, cfg: DNetConfig) -> Tensor:
    """Per-pixel real/fake score in (0, 1), shape ``[B, 1, H, W]``."""
    T._check_nchw(product, "dnet_forward")
    _, c, h, w = product.shape
    if c != cfg.in_channels:
        raise ValueError(f"D-net expects {cfg.in_channels} channels, got {c}")
    if h % cfg.downsample or w % cfg.downsample:
        raise ValueError(f"D-net input {h}x{w} not divisible by {cfg.downsample}")
    pad = (cfg.kernel - cfg.stride) // 2
    x = product
    for i in range(len(cfg.channels)):
        x = T.leaky_relu(_conv(x, params, f"down{i}", stride=cfg.stride, padding=pad), cfg.leaky_slope)
    score = T.sigmoid(_conv(x, params, "classify"))
    return T.bilinear_upsample(score, cfg.downsample)
