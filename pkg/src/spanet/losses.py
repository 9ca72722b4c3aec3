"""Objective functions: smooth Jaccard for segmentation, mean squared
error for detection, and background-ignoring smoothed L1 for the
positional embeddings. All accept torch tensors of matching shape and
stay differentiable in the prediction."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

JACCARD_EPS = 1.0
HUBER_KNEE = 1.0  # targets live in [0,1]; the linear branch still matters for contract fidelity


@dataclass
class LossValue:
    """A scalar loss plus the number of pixels that contributed to it."""

    value: Tensor
    pixel_count: int

    def item(self) -> float:
        return float(self.value)


def _check_shapes(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def smooth_jaccard(pred: Tensor, target: Tensor) -> LossValue:
    """1 - (|intersection| + eps) / (|union| + eps) with soft intersection
    sum(p*t) and smoothing eps = 1 guarding empty targets."""
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    union = pred.sum() + target.sum() - inter
    loss = 1.0 - (inter + JACCARD_EPS) / (union + JACCARD_EPS)
    return LossValue(loss, pixel_count=pred.numel())


def mse(pred: Tensor, target: Tensor) -> LossValue:
    """Mean over all pixels of the squared error."""
    _check_shapes(pred, target)
    loss = ((pred - target) ** 2).mean()
    return LossValue(loss, pixel_count=pred.numel())


def masked_smooth_l1(pred: Tensor, target: Tensor, mask: Tensor) -> LossValue:
    """Huber loss averaged over foreground pixels times channels only.

    ``mask`` marks foreground pixels; when pred carries a channel axis
    (..., C, H, W) a (..., H, W) mask is applied to every channel.
    Background contributes nothing, including to the gradient. Returns 0
    with pixel_count 0 when the mask is empty.
    """
    _check_shapes(pred, target)
    m = mask.to(dtype=torch.bool)
    pixel_count = int(m.sum())
    if m.shape != pred.shape:
        if m.dim() != pred.dim() - 1:
            raise ValueError(f"mask shape {tuple(m.shape)} incompatible with pred {tuple(pred.shape)}")
        m = m.unsqueeze(-3).expand_as(pred)
    if pixel_count == 0:
        return LossValue(torch.zeros((), dtype=pred.dtype, device=pred.device), 0)
    err = pred[m] - target[m]
    abs_err = err.abs()
    quadratic = 0.5 * err * err
    linear = abs_err - 0.5 * HUBER_KNEE
    loss = torch.where(abs_err < HUBER_KNEE, quadratic, linear).mean()
    return LossValue(loss, pixel_count=pixel_count)
