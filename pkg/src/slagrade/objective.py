"""Masked multi-target mean-squared error.

The loss divides the masked squared-error sum by the number of observed
labels, so a partially annotated session still contributes its known
targets without the missing ones pulling predictions anywhere.
"""

from __future__ import annotations

import numpy as np
import torch


class EmptyMaskError(ValueError):
    """Every target in the batch is masked; the loss is undefined."""


def _check(pred, target, mask):
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                         f"mask {tuple(mask.shape)}")


def masked_mse(pred, target, mask):
    """``sum(m * (pred - target)**2) / sum(m)``.

    Accepts torch tensors (differentiable) or array-likes (returns a float).
    Raises :class:`EmptyMaskError` when nothing is observed.
    """
    if torch.is_tensor(pred):
        target = torch.as_tensor(target, dtype=pred.dtype)
        mask = torch.as_tensor(mask).to(torch.bool)
        _check(pred, target, mask)
        count = int(mask.sum())
        if count == 0:
            raise EmptyMaskError("masked_mse: all targets masked")
        diff = (pred - target)[mask]
        return (diff * diff).sum() / count
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check(pred, target, mask)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("masked_mse: all targets masked")
    # summing only observed entries keeps the result independent of masked rows
    diff = (pred - target)[mask]
    return float((diff * diff).sum() / count)


def masked_mse_grad(pred, target, mask) -> np.ndarray:
    """Analytic gradient of :func:`masked_mse` with respect to ``pred``."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check(pred, target, mask)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("masked_mse_grad: all targets masked")
    return np.where(mask, 2.0 * (pred - target) / count, 0.0)
