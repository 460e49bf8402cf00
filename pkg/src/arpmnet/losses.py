"""Training losses: cross-entropies, the adaptive class weights and the
segmentation / discriminator objectives of the adversarial scheme.

All losses are sums over pixels (and over the batch), not means.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import DNetConfig, NetParams, dnet_forward
from .tensor import Tensor

DEFAULT_LAMBDA = 0.1


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def mce(pred_prob: Tensor, truth_onehot: Tensor) -> Tensor:
    """Multi-class cross-entropy ``-sum y * ln(p)``."""
    _check_same(pred_prob, truth_onehot, "mce")
    return -T.sum(truth_onehot * T.safe_log(pred_prob))


def adaptive_mce(pred_prob: Tensor, truth_onehot: Tensor, weights) -> Tensor:
    """Class-weighted cross-entropy ``-sum w_c * y * ln(p)``."""
    _check_same(pred_prob, truth_onehot, "adaptive_mce")
    w = np.asarray(weights, dtype=truth_onehot.dtype)
    if w.shape != (truth_onehot.shape[1],):
        raise ValueError(f"adaptive_mce: need {truth_onehot.shape[1]} weights, got shape {w.shape}")
    weighted = truth_onehot * T.Tensor(w[None, :, None, None], dtype=truth_onehot.dtype)
    return -T.sum(weighted * T.safe_log(pred_prob))


def bce(pred: Tensor, target) -> Tensor:
    """Binary cross-entropy against a constant 0/1 target (scalar or map)."""
    if isinstance(target, (int, float)):
        if target == 1:
            return -T.sum(T.safe_log(pred))
        if target == 0:
            return -T.sum(T.safe_log(1.0 - pred))
        target = T.Tensor(np.full(pred.shape, float(target)), dtype=pred.dtype)
    elif not isinstance(target, Tensor):
        target = T.Tensor(target, dtype=pred.dtype)
    return -T.sum(target * T.safe_log(pred) + (1.0 - target) * T.safe_log(1.0 - pred))


def weight_law(dsc, share):
    """``2 - DSC + ln(1 / share)`` for a class covering fraction ``share`` of the batch."""
    dsc = np.clip(np.asarray(dsc, dtype=np.float64), 0.0, 1.0)
    share = np.asarray(share, dtype=np.float64)
    if np.any(share <= 0) or np.any(share > 1):
        raise ValueError("pixel share must lie in (0, 1]")
    return 2.0 - dsc - np.log(share)


def adaptive_weights(dsc, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class weights ``2 - DSC_i + ln(total / count_i)`` for classes in ``labels``.

    ``dsc`` holds the per-class Dice scores of the last validation; the pixel
    counts come from the ground-truth batch. Absent classes get weight 0.
    """
    dsc = np.clip(np.asarray(dsc, dtype=np.float64), 0.0, 1.0)
    if dsc.shape != (num_classes,):
        raise ValueError(f"need {num_classes} Dice scores, got shape {dsc.shape}")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("adaptive_weights needs at least one pixel")
    counts = np.bincount(labels.ravel(), minlength=num_classes)[:num_classes].astype(np.float64)
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = weight_law(dsc[present], counts[present] / labels.size)
    return w


def fake_product(image: Tensor, pred_prob: Tensor) -> Tensor:
    return pred_prob * image


def seg_loss(
    image: Tensor,
    truth_onehot: Tensor,
    pred_prob: Tensor,
    dnet: NetParams,
    dcfg: DNetConfig,
    weights,
    lam: float = DEFAULT_LAMBDA,
) -> tuple[Tensor, Tensor, Tensor]:
    """Segmentation objective ``adaptive_mce - lam * bce(D(x * p), 0)``.

    The discriminator parameters are frozen here, so only the S-net (through
    ``pred_prob``) receives gradients. Returns ``(L_S, adaptive_mce, bce_fake)``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    weighted = adaptive_mce(pred_prob, truth_onehot, weights)
    if lam == 0:
        return weighted, weighted, T.zeros(())
    fake = bce(dnet_forward(fake_product(image, pred_prob), dnet.detached(), dcfg), 0)
    return weighted - lam * fake, weighted, fake


def disc_loss(
    image: Tensor, truth_onehot: Tensor, pred_prob: Tensor, dnet: NetParams, dcfg: DNetConfig
) -> Tensor:
    """Discriminator objective ``bce(D(x * y), 1) + bce(D(x * p), 0)``.

    The prediction enters as a constant; gradients reach only the D-net.
    """
    real = dnet_forward(truth_onehot.detach() * image.detach(), dnet, dcfg)
    fake = dnet_forward(fake_product(image.detach(), pred_prob.detach()), dnet, dcfg)
    return bce(real, 1) + bce(fake, 0)


def joint_loss(
    image: Tensor,
    truth_onehot: Tensor,
    pred_prob: Tensor,
    dnet: NetParams,
    dcfg: DNetConfig,
    lam: float = DEFAULT_LAMBDA,
) -> Tensor:
    """Min-max objective ``mce - lam * L_D``, for reporting only."""
    return mce(pred_prob, truth_onehot) - lam * disc_loss(image, truth_onehot, pred_prob, dnet, dcfg)
