"""Task losses. Accept tensors or array-likes; return tensors."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def _t(x, like=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def mse_loss(pred, target) -> torch.Tensor:
    """Mean squared error over the last axis (the six emotions)."""
    pred = _t(pred)
    target = _t(target, pred)
    return ((pred - target) ** 2).mean(dim=-1)


def bce_logit_loss(logit, label) -> torch.Tensor:
    logit = _t(logit)
    label = _t(label, logit).to(logit.dtype)
    return F.binary_cross_entropy_with_logits(logit, label, reduction="none")
