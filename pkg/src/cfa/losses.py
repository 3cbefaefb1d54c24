"""Classification and feature-alignment losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.nn import functional as F


@dataclass
class LossBreakdown:
    ce_original: torch.Tensor
    ce_variant: torch.Tensor
    cwmse: torch.Tensor
    total: torch.Tensor
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {
            "ce_orig": self.ce_original.item(),
            "ce_var": self.ce_variant.item(),
            "cwmse": self.cwmse.item(),
            "total": self.total.item(),
        }


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    return F.cross_entropy(logits, labels)


def _channel_deviation(f: torch.Tensor, f_tilde: torch.Tensor) -> torch.Tensor:
    if f.shape != f_tilde.shape:
        raise ValueError(f"feature shapes differ: {tuple(f.shape)} vs {tuple(f_tilde.shape)}")
    if f.dim() != 4:
        raise ValueError("features must be b x c x h x w")
    return ((f - f_tilde) ** 2).sum(dim=(2, 3))


def _weights_from_deviation(dev: torch.Tensor) -> torch.Tensor:
    c = dev.shape[1]
    total = dev.sum(dim=1, keepdim=True)
    # samples whose features already agree get uniform weights
    safe = torch.where(total > 0, total, torch.ones_like(total))
    return torch.where(total > 0, c * dev / safe, torch.ones_like(dev))


def cwmse_weights(f: torch.Tensor, f_tilde: torch.Tensor) -> torch.Tensor:
    """Per-sample channel weights c * D_ij / sum_j D_ij; each row averages to 1."""
    return _weights_from_deviation(_channel_deviation(f, f_tilde))


def cwmse(
    f: torch.Tensor,
    f_tilde: torch.Tensor,
    *,
    weighted: bool = True,
    detach_weights: bool = True,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Channel-weighted MSE between two feature stacks.

    ``weighted=False`` gives the plain MSE.  With ``detach_weights`` the weights
    act as constants during differentiation; ``weights`` overrides them outright.
    """
    dev = _channel_deviation(f, f_tilde)
    if weights is not None:
        if weights.shape != dev.shape:
            raise ValueError("weights must be b x c")
        dev = weights * dev
    elif weighted:
        w = _weights_from_deviation(dev.detach() if detach_weights else dev)
        dev = w * dev
    return dev.sum() / f.numel()


def total_loss(
    logits_x: torch.Tensor,
    logits_variant: torch.Tensor,
    labels: torch.Tensor,
    f: torch.Tensor,
    f_tilde: torch.Tensor,
    lam: float = 1.0,
    *,
    weighted: bool = True,
    detach_weights: bool = True,
    weights: torch.Tensor | None = None,
) -> LossBreakdown:
    """Half the summed CE of originals and variants plus ``lam`` times the alignment term."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    ce_o = cross_entropy(logits_x, labels)
    ce_v = cross_entropy(logits_variant, labels)
    align = cwmse(f, f_tilde, weighted=weighted, detach_weights=detach_weights, weights=weights)
    total = 0.5 * (ce_o + ce_v) + lam * align
    return LossBreakdown(ce_o, ce_v, align, total, lam)
