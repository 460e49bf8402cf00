"""Adam with bias correction and the polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import NetParams


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.t = 0
        self.m.clear()
        self.v.clear()


def adam_step(params: NetParams, state: OptimState, lr: float) -> None:
    """One in-place Adam update of every trainable tensor from its ``.grad``.

    Running batch-norm statistics are not trainable and are left alone.
    """
    trainable = params.trainable()
    missing = [k for k, t in trainable if t.grad is None]
    if missing:
        raise ValueError(f"missing gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for key, p in trainable:
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    max_iter: int
    power: float = 0.9

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def poly_lr(sched: LrSchedule, it: int) -> float:
    """``base_lr * (1 - it/max_iter)**power``; the final step uses ``base_lr * 1e-4``."""
    if it < 0 or it > sched.max_iter:
        raise ValueError(f"iteration {it} outside [0, {sched.max_iter}]")
    if it == sched.max_iter:
        return sched.base_lr * 1e-4
    return sched.base_lr * (1.0 - it / sched.max_iter) ** sched.power
