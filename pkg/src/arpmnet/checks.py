"""Finite-difference gradient checks over primitives, blocks and the full S-net.

Every case reduces its output to a scalar by contracting it with a fixed
random tensor, so each output coordinate contributes to the checked
gradient. Inputs to piecewise-linear ops are drawn away from their kinks;
cases that pass through ReLUs or max-pools inside larger graphs use the
smallest allowed step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import (
    DNetConfig,
    MRFConfig,
    SNetConfig,
    dnet_forward,
    init_params,
    mrf_block,
    multires_block,
    multiscale_pool,
    residual_forward_path,
    snet_forward,
)
from .losses import adaptive_mce, bce, mce

TOLERANCE = 1e-4
SCOPES = ("op", "block", "net")


MAX_DRAWS = 20


@dataclass
class CheckResult:
    name: str
    error: float
    # check points discarded because a probe step crossed a kink
    redraws: int = 0

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[T.Tensor], T.Tensor], T.Tensor]]
    h: float = 1e-3
    max_coords: int | None = 40


def _t(a) -> T.Tensor:
    return T.Tensor(a, dtype=np.float64)


def _contract(out: T.Tensor, rng: np.random.Generator) -> Callable[[T.Tensor], T.Tensor]:
    r = _t(rng.normal(size=out.shape))
    return lambda y: T.sum(y * r)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=0.01):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _unary(fn, make=lambda rng: rng.normal(size=(2, 3, 5, 6))):
    def build(rng):
        x = _t(make(rng))
        red = _contract(fn(x), rng)
        return (lambda p: red(fn(p))), x

    return build


def _wrt(fn, shapes, which, makers=None):
    """Check ``fn(*args)`` with respect to argument ``which``."""

    def build(rng):
        args = []
        for i, s in enumerate(shapes):
            mk = (makers or {}).get(i)
            args.append(_t(mk(rng) if mk else rng.normal(size=s)))
        red = _contract(fn(*args), rng)

        def f(p):
            a = list(args)
            a[which] = p
            return red(fn(*a))

        return f, args[which]

    return build


def op_cases() -> list[Case]:
    x4 = (2, 3, 6, 6)
    cases = [
        Case("add[a]", _wrt(T.add, [x4, (1, 3, 1, 1)], 0)),
        Case("add[b broadcast]", _wrt(T.add, [x4, (1, 3, 1, 1)], 1)),
        Case("sub[a]", _wrt(T.sub, [x4, x4], 0)),
        Case("sub[b]", _wrt(T.sub, [x4, x4], 1)),
        Case("mul[a]", _wrt(T.mul, [x4, x4], 0)),
        Case("mul[b broadcast]", _wrt(T.mul, [x4, (1, 3, 1, 1)], 1)),
        Case("neg", _unary(T.neg)),
    ]
    for stride, dil, pad in ((1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 3, 3)):
        tag = f"s{stride}d{dil}p{pad}"

        def conv(x, w, b, stride=stride, dil=dil, pad=pad):
            return T.conv2d(x, w, b, stride=stride, dilation=dil, padding=pad)

        shapes = [(2, 3, 8, 8), (4, 3, 3, 3), (4,)]
        for i, arg in enumerate(("x", "weight", "bias")):
            cases.append(Case(f"conv2d[{tag},{arg}]", _wrt(conv, shapes, i)))
    cases.append(Case("conv2d[k4s2p1,x]", _wrt(lambda x, w: T.conv2d(x, w, stride=2, padding=1), [(1, 2, 8, 8), (3, 2, 4, 4)], 0)))
    cases.append(Case("conv2d[k1,weight]", _wrt(lambda x, w: T.conv2d(x, w), [(2, 3, 4, 4), (5, 3, 1, 1)], 1)))
    for dil in (1, 2):

        def dw(x, w, dil=dil):
            return T.depthwise_conv2d(x, w, dilation=dil, padding=dil)

        for i, arg in enumerate(("x", "weight")):
            cases.append(Case(f"depthwise_conv2d[d{dil},{arg}]", _wrt(dw, [(2, 3, 6, 6), (3, 3, 3)], i)))
    for factor in (2, 4):
        cases.append(Case(f"bilinear_upsample[x{factor}]", _unary(lambda x, f=factor: T.bilinear_upsample(x, f))))

    def bn_train(x, g, b):
        return T.batchnorm2d(x, g, b, None, None, training=True)

    def bn_eval(x, g, b):
        rm = _t(np.linspace(-0.5, 0.5, 3))
        rv = _t(np.linspace(0.5, 2.0, 3))
        return T.batchnorm2d(x, g, b, rm, rv, training=False)

    for mode, fn in (("train", bn_train), ("eval", bn_eval)):
        for i, arg in enumerate(("x", "gamma", "beta")):
            cases.append(Case(f"batchnorm2d[{mode},{arg}]", _wrt(fn, [(3, 3, 4, 4), (3,), (3,)], i)))
    cases += [
        Case("relu", _unary(T.relu, lambda rng: _away_from_zero(rng, (2, 3, 5, 5)))),
        Case("leaky_relu", _unary(lambda x: T.leaky_relu(x, 0.2), lambda rng: _away_from_zero(rng, (2, 3, 5, 5)))),
        Case("sigmoid", _unary(T.sigmoid)),
        Case("softmax_channels", _unary(T.softmax_channels)),
        Case(
            "concat_channels",
            _wrt(lambda a, b: T.concat_channels([a, b, a]), [(2, 2, 3, 3), (2, 4, 3, 3)], 0),
        ),
        Case("slice_channels", _unary(lambda x: T.slice_channels(x, 1, 3))),
        Case(
            "split_channels",
            _unary(lambda x: T.concat_channels([p * float(i + 1) for i, p in enumerate(T.split_channels(x, [1, 2, 3]))]),
                   lambda rng: rng.normal(size=(2, 6, 3, 3))),
        ),
        Case(
            "channel_maxpool3d",
            _unary(lambda x: T.channel_maxpool3d(x, (3, 3, 3)), lambda rng: _distinct(rng, (2, 4, 5, 5))),
            max_coords=None,
        ),
        Case("sum", _unary(lambda x: T.sum(x) * T.sum(x))),
        Case("mean", _unary(lambda x: T.mean(x) * T.sum(x))),
        Case("safe_log", _unary(T.safe_log, lambda rng: rng.uniform(0.5, 2.0, size=(2, 3, 4, 4)))),
    ]

    def loss_case(fn):
        def build(rng):
            logits = _t(rng.normal(size=(2, 3, 4, 4)))
            y = _t(np.moveaxis(np.eye(3)[rng.integers(0, 3, size=(2, 4, 4))], -1, 1))
            return (lambda p: fn(T.softmax_channels(p), y)), logits

        return build

    cases += [
        Case("mce", loss_case(mce)),
        Case("adaptive_mce", loss_case(lambda p, y: adaptive_mce(p, y, [0.5, 1.7, 2.3]))),
        Case("bce[target 1]", _unary(lambda x: bce(T.sigmoid(x), 1))),
        Case("bce[target 0]", _unary(lambda x: bce(T.sigmoid(x), 0))),
    ]
    return cases


def _params(cfg, rng, randomize_mrf=True):
    with T.precision("float64"):
        p = init_params(cfg, int(rng.integers(2**31)))
    if randomize_mrf and "mrf.global.weight" in p:
        for k in ("mrf.global.weight", "mrf.global.bias"):
            p[k].data = rng.normal(scale=0.5, size=p[k].shape)
    return p


def _block_param_case(fn_with_params, make_params, key, shape=(2, 16, 8, 8)):
    def build(rng):
        params = make_params(rng)
        x = _t(rng.normal(size=shape))
        red = _contract(fn_with_params(x, params), rng)

        def f(p):
            saved = params[key]
            params[key] = p
            try:
                return red(fn_with_params(x, params))
            finally:
                params[key] = saved

        return f, params[key]

    return build


def block_cases() -> list[Case]:
    small = SNetConfig(levels=2, base_channels=16, num_classes=3, mrf=MRFConfig(local_kernel=3))

    def snet_params(rng):
        return _params(small, rng)

    def block_input(shape):
        def build_for(fn):
            def build(rng):
                params = snet_params(rng)
                x = _t(rng.normal(size=shape))
                red = _contract(fn(x, params), rng)
                return (lambda p: red(fn(p, params))), x

            return build

        return build_for

    mr = lambda x, p: multires_block(x, p, "enc0.multires", 16)  # noqa: E731
    msp = lambda x, p: multiscale_pool(x, p, "enc0.pool")  # noqa: E731
    rfp = lambda x, p: residual_forward_path(x, p, "skip0", 2)  # noqa: E731
    mrf = lambda x, p: mrf_block(x, p, "mrf", small.mrf)  # noqa: E731

    dcfg = DNetConfig(in_channels=3, channels=(4, 4, 4, 4))

    def dnet_build(rng):
        params = _params(dcfg, rng)
        x = _t(rng.uniform(0, 1, size=(1, 3, 16, 16)))
        red = _contract(dnet_forward(x, params, dcfg), rng)
        return (lambda p: red(dnet_forward(p, params, dcfg))), x

    return [
        Case("multires_block[x]", block_input((2, 1, 8, 8))(mr), h=1e-5),
        Case("multires_block[stage2.conv.weight]", _block_param_case(mr, snet_params, "enc0.multires.stage2.conv.weight", (2, 1, 8, 8)), h=1e-5),
        Case("multiscale_pool[x]", block_input((2, 16, 8, 8))(msp), h=1e-5),
        Case("multiscale_pool[branch3.weight]", _block_param_case(msp, snet_params, "enc0.pool.branch3.weight"), h=1e-5),
        Case("residual_forward_path[x]", block_input((2, 16, 8, 8))(rfp), h=1e-5),
        Case("mrf_block[x]", block_input((2, 3, 8, 8))(mrf), h=1e-5),
        Case("mrf_block[local1.weight]", _block_param_case(mrf, snet_params, "mrf.local1.weight", (2, 3, 8, 8)), h=1e-5),
        Case("mrf_block[global.weight]", _block_param_case(mrf, snet_params, "mrf.global.weight", (2, 3, 8, 8)), h=1e-5),
        Case("dnet_forward[x]", dnet_build, h=1e-5),
    ]


NET_CONFIG = SNetConfig(levels=2, base_channels=16, num_classes=3, mrf=MRFConfig(local_kernel=3))
NET_KEYS = ("image", "enc0.multires.stage1.conv.weight", "enc1.multires.stage3.bn.gamma", "dec0.up.weight", "head.weight", "mrf.local0.weight", "mrf.global.weight")


def net_case(key: str, cfg: SNetConfig = NET_CONFIG, size: int = 16, max_coords: int | None = 30) -> Case:
    """``mce(softmax(snet_forward(image)))`` against ``key`` (a parameter name or ``"image"``)."""

    def build(rng):
        params = _params(cfg, rng)
        image = _t(rng.uniform(0, 1, size=(2, 1, size, size)))
        labels = rng.integers(0, cfg.num_classes, size=(2, size, size))
        y = _t(np.moveaxis(np.eye(cfg.num_classes)[labels], -1, 1))

        def loss(img, prm):
            return mce(T.softmax_channels(snet_forward(img, prm, cfg, training=True)), y)

        if key == "image":
            return (lambda p: loss(p, params)), image

        def f(p):
            saved = params[key]
            params[key] = p
            try:
                return loss(image, params)
            finally:
                params[key] = saved

        return f, params[key]

    return Case(f"mce(snet)[{key}]", build, h=1e-5, max_coords=max_coords)


def net_cases() -> list[Case]:
    return [net_case(k) for k in NET_KEYS]


def cases_for(scope: str) -> list[Case]:
    if scope == "op":
        return op_cases()
    if scope == "block":
        return block_cases()
    if scope == "net":
        return net_cases()
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


def run_case(case: Case, seed: int) -> CheckResult:
    """Check one case at the first point drawn from ``seed`` that is smooth
    along every probed coordinate.

    Points where a probe step of size ``h`` flips a ReLU, max-pool or clamp
    branch are redrawn from the same generator; the count is reported.
    """
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        for draw in range(MAX_DRAWS):
            f, point = case.build(rng)
            if T.branch_stable(f, point, case.h, case.max_coords, seed):
                err = T.grad_check(f, point, h=case.h, max_coords=case.max_coords, seed=seed)
                return CheckResult(case.name, err, draw)
    return CheckResult(case.name, float("inf"), MAX_DRAWS)


def run_scope(scope: str, seeds=(0,)) -> list[CheckResult]:
    """Worst error per case over ``seeds``, with the total number of redraws."""
    out = []
    for case in cases_for(scope):
        results = [run_case(case, s) for s in seeds]
        out.append(CheckResult(case.name, max(r.error for r in results), sum(r.redraws for r in results)))
    return out
