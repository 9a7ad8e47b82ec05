"""Pseudo-label weights from the disagreement of the two domain depth decoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError

EPSILON = 1e-6


@dataclass
class WeightMap:
    w: torch.Tensor  # in [0, 1]
    delta: torch.Tensor  # >= 0
    valid: torch.Tensor  # bool

    @property
    def mean_valid(self) -> float:
        """Mean weight over valid pixels (1.0 when nothing is valid)."""
        if not self.valid.any():
            return 1.0
        return float(self.w[self.valid].mean())


def depth_discrepancy(pred_src, pred_tgt) -> torch.Tensor:
    if pred_src.shape != pred_tgt.shape:
        raise ContractError(f"shape mismatch {tuple(pred_src.shape)} vs {tuple(pred_tgt.shape)}")
    return (pred_src - pred_tgt).abs()


@torch.no_grad()
def difficulty_weights(delta, d_T, valid=None, epsilon: float = EPSILON) -> WeightMap:
    """w = relu(1 - delta / (d_T + eps)) on valid pixels, 1 elsewhere.

    ``delta`` and ``d_T`` must share one depth space; the training loop
    passes meters (see ``decoder_weights``).
    """
    delta = delta.detach()
    d_T = torch.as_tensor(d_T, dtype=delta.dtype).reshape(delta.shape)
    if valid is None:
        valid = torch.ones_like(delta, dtype=torch.bool)
    valid = torch.as_tensor(valid).reshape(delta.shape).bool()
    if (delta < 0).any():
        raise ContractError("negative discrepancy")
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    w = torch.relu(1.0 - delta / (d_T + epsilon)).clamp(max=1.0)
    w = torch.where(valid, w, torch.ones_like(w))
    return WeightMap(w=w, delta=delta, valid=valid)


def metric_depth(inv: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    """Meters from normalized inverse depth, clamped to [d_min, d_max]."""
    if not 0 < d_min < d_max:
        raise ContractError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    inv = inv.clamp(0.0, 1.0)
    return 1.0 / (inv * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max)


@torch.no_grad()
def decoder_weights(pred_src, pred_tgt, depth_T, valid, d_min: float, d_max: float,
                    epsilon: float = EPSILON) -> WeightMap:
    """Weights from the two decoders' inverse-depth predictions.

    The discrepancy is taken in meters and divided by the metric pseudo
    depth, so w measures relative disagreement. In inverse depth the far
    range sits near zero and the ratio explodes there.
    """
    delta = depth_discrepancy(metric_depth(pred_src, d_min, d_max), metric_depth(pred_tgt, d_min, d_max))
    return difficulty_weights(delta, depth_T, valid, epsilon)
