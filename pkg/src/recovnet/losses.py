"""Training losses: binary focal, soft dice, their sum, and cross-entropy.

Each loss has a paired ``*_grad`` function returning the exact derivative
with respect to the predictions. Gradients honor the same epsilon clamp as
the forward value (clamped elements get zero gradient), so central finite
differences of the forward match the analytic gradient.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-7


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("empty prediction tensor")
    return pred, target


def _check_binary(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("target must be binary (0/1)")


def binary_focal_loss(
    pred: np.ndarray, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0
) -> float:
    """Mean over elements of ``-alpha_t * (1 - p_t)**gamma * log(p_t)``.

    ``p_t`` is ``pred`` where the target is 1 and ``1 - pred`` elsewhere;
    ``alpha_t`` follows the same convention. With ``gamma=0, alpha=0.5``
    this reduces to half the mean binary cross-entropy.
    """
    pred, target = _check_pair(pred, target)
    _check_binary(target)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p = np.clip(pred, EPS, 1.0 - EPS)
    pos = target > 0.5
    pt = np.where(pos, p, 1.0 - p)
    at = np.where(pos, alpha, 1.0 - alpha)
    return float(np.mean(-at * (1.0 - pt) ** gamma * np.log(pt)))


def binary_focal_loss_grad(
    pred: np.ndarray, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0
) -> np.ndarray:
    """d(binary_focal_loss)/d(pred), elementwise."""
    pred, target = _check_pair(pred, target)
    _check_binary(target)
    p = np.clip(pred, EPS, 1.0 - EPS)
    pos = target > 0.5
    pt = np.where(pos, p, 1.0 - p)
    at = np.where(pos, alpha, 1.0 - alpha)
    one_m = 1.0 - pt
    # d/dpt of -at*(1-pt)^g*log(pt); the g=0 branch avoids 0 * (1/one_m) overflow
    if gamma == 0.0:
        dpt = -at / pt
    else:
        dpt = at * (gamma * one_m ** (gamma - 1.0) * np.log(pt) - one_m**gamma / pt)
    sign = np.where(pos, 1.0, -1.0)
    inside = (pred > EPS) & (pred < 1.0 - EPS)
    grad = dpt * sign * inside / pred.size
    return grad.astype(pred.dtype, copy=False)


def dice_loss(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> float:
    """Soft dice loss, computed per sample and averaged over the batch.

    ``1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)`` with the leading axis
    as the batch. Always in [0, 1) for ``smooth > 0``.
    """
    pred, target = _check_pair(pred, target)
    _check_binary(target)
    if smooth <= 0.0:
        raise ValueError(f"smooth must be > 0, got {smooth}")
    b = pred.shape[0]
    p2 = pred.reshape(b, -1)
    t2 = target.reshape(b, -1)
    inter = (p2 * t2).sum(axis=1)
    denom = p2.sum(axis=1) + t2.sum(axis=1) + smooth
    per_sample = 1.0 - (2.0 * inter + smooth) / denom
    return float(per_sample.mean())


def dice_loss_grad(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    """d(dice_loss)/d(pred), elementwise."""
    pred, target = _check_pair(pred, target)
    _check_binary(target)
    if smooth <= 0.0:
        raise ValueError(f"smooth must be > 0, got {smooth}")
    b = pred.shape[0]
    p2 = pred.reshape(b, -1)
    t2 = target.reshape(b, -1)
    inter = (p2 * t2).sum(axis=1, keepdims=True)
    denom = p2.sum(axis=1, keepdims=True) + t2.sum(axis=1, keepdims=True) + smooth
    grad = -(2.0 * t2 * denom - (2.0 * inter + smooth)) / denom**2 / b
    return grad.reshape(pred.shape).astype(pred.dtype, copy=False)


def hybrid_segmentation_loss(
    pred: np.ndarray,
    target: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    smooth: float = 1.0,
) -> float:
    """Unweighted sum of the binary focal and dice losses."""
    return binary_focal_loss(pred, target, alpha, gamma) + dice_loss(pred, target, smooth)


def hybrid_segmentation_loss_grad(
    pred: np.ndarray,
    target: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    smooth: float = 1.0,
) -> np.ndarray:
    return binary_focal_loss_grad(pred, target, alpha, gamma) + dice_loss_grad(
        pred, target, smooth
    )


def _check_onehot(onehot: np.ndarray) -> None:
    if onehot.ndim != 2:
        raise ValueError(f"one-hot target must be 2-D, got shape {onehot.shape}")
    if not np.all((onehot == 0) | (onehot == 1)) or not np.all(onehot.sum(axis=1) == 1):
        raise ValueError("target rows must be one-hot")


def categorical_cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean over the batch of ``-sum_c onehot * log(probs)`` with clamping."""
    probs, onehot = _check_pair(probs, onehot)
    _check_onehot(onehot)
    p = np.clip(probs, EPS, 1.0 - EPS)
    return float(np.mean(-(onehot * np.log(p)).sum(axis=1)))


def categorical_cross_entropy_grad(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """d(categorical_cross_entropy)/d(probs), elementwise."""
    probs, onehot = _check_pair(probs, onehot)
    _check_onehot(onehot)
    p = np.clip(probs, EPS, 1.0 - EPS)
    inside = (probs > EPS) & (probs < 1.0 - EPS)
    grad = -(onehot / p) * inside / probs.shape[0]
    return grad.astype(probs.dtype, copy=False)
