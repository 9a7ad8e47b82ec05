"""Segmentation and depth losses and the combined dual-domain objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .datasets import IGNORE_INDEX
from .errors import ConfigError, ContractError
from .model import ModelOutput

LOSS_TERMS = (
    "seg_init_S",
    "seg_init_T",
    "depth_init_S",
    "depth_init_T",
    "seg_final_S",
    "seg_final_T",
    "depth_final_S",
    "depth_final_T",
)


@dataclass
class LossWeights:
    alpha_S: float = 0.01
    alpha_T: float = 0.001
    berhu_c_fraction: float = 0.2

    def __post_init__(self):
        if self.alpha_S < 0 or self.alpha_T < 0:
            raise ConfigError("depth loss weights must be >= 0")
        if not 0 < self.berhu_c_fraction <= 1:
            raise ConfigError("berhu_c_fraction must lie in (0, 1]")


@dataclass
class LossBreakdown:
    seg_init_S: torch.Tensor
    seg_init_T: torch.Tensor
    depth_init_S: torch.Tensor
    depth_init_T: torch.Tensor
    seg_final_S: torch.Tensor
    seg_final_T: torch.Tensor
    depth_final_S: torch.Tensor
    depth_final_T: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def berhu_pointwise(e: torch.Tensor, c) -> torch.Tensor:
    a = e.abs()
    if float(c) <= 0:
        return a
    return torch.where(a <= c, a, (e * e + c * c) / (2 * c))


def berhu(pred, target, valid_mask=None, c_fraction: float = 0.2) -> torch.Tensor:
    """Reverse Huber loss averaged over valid pixels.

    The threshold is ``c_fraction`` times the largest absolute error over the
    valid pixels of this call and is held constant for gradients.
    """
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if torch.isnan(pred).any() or torch.isnan(target).any():
        raise ContractError("NaN in berHu input")
    if valid_mask is None:
        valid_mask = torch.ones_like(target, dtype=torch.bool)
    valid_mask = valid_mask.reshape(target.shape).bool()
    if not valid_mask.any():
        warnings.warn("berhu: no valid pixels, returning 0", RuntimeWarning, stacklevel=2)
        return pred.sum() * 0.0
    e = (pred - target)[valid_mask]
    c = c_fraction * e.detach().abs().max()
    return berhu_pointwise(e, c).mean()


def weighted_cross_entropy(logits, labels, pixel_weights=None, ignore_index: int = IGNORE_INDEX):
    """Sum of per-pixel weighted CE divided by the number of non-ignored pixels.

    Accepts ``C x H x W`` or ``B x C x H x W`` logits.
    """
    if logits.ndim == 3:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
        if pixel_weights is not None:
            pixel_weights = pixel_weights.unsqueeze(0)
    num_classes = logits.shape[1]
    labels = labels.long()
    bad = (labels >= num_classes) & (labels != ignore_index) | (labels < 0)
    if bad.any():
        raise ContractError(f"labels outside 0..{num_classes - 1} and not {ignore_index}")
    keep = labels != ignore_index
    count = keep.sum()
    if count == 0:
        return logits.sum() * 0.0
    ce = F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="none")
    if pixel_weights is not None:
        ce = ce * pixel_weights.reshape(ce.shape)
    return ce[keep].sum() / count


def total_loss(
    out_S: ModelOutput,
    out_T: ModelOutput,
    y_S,
    d_S_inv,
    pseudo_T,
    w_T,
    d_T_inv,
    weights: LossWeights,
    d_S_valid=None,
    d_T_valid=None,
    out_T_depth: ModelOutput | None = None,
    depth_terms: bool = True,
) -> LossBreakdown:
    """All eight loss terms plus their weighted sum.

    ``out_T`` supplies the target semantic predictions (possibly of a mixed
    image) and ``out_T_depth`` the target depth predictions; by default both
    come from ``out_T``. With ``depth_terms=False`` the four depth terms are
    exactly zero.
    """
    if out_T_depth is None:
        out_T_depth = out_T
    cf = weights.berhu_c_fraction
    zero = out_S.sem_final.sum() * 0.0
    terms = {
        "seg_init_S": weighted_cross_entropy(out_S.sem_init, y_S),
        "seg_final_S": weighted_cross_entropy(out_S.sem_final, y_S),
        "seg_init_T": weighted_cross_entropy(out_T.sem_init, pseudo_T, w_T),
        "seg_final_T": weighted_cross_entropy(out_T.sem_final, pseudo_T, w_T),
    }
    if depth_terms:
        terms["depth_init_S"] = berhu(out_S.depth_init[:, 0], d_S_inv, d_S_valid, cf)
        terms["depth_final_S"] = berhu(out_S.depth_final[:, 0], d_S_inv, d_S_valid, cf)
        terms["depth_init_T"] = berhu(out_T_depth.depth_init[:, 0], d_T_inv, d_T_valid, cf)
        terms["depth_final_T"] = berhu(out_T_depth.depth_final[:, 0], d_T_inv, d_T_valid, cf)
    else:
        for k in ("depth_init_S", "depth_final_S", "depth_init_T", "depth_final_T"):
            terms[k] = zero
    total = (
        terms["seg_init_S"] + terms["seg_init_T"] + terms["seg_final_S"] + terms["seg_final_T"]
        + weights.alpha_S * (terms["depth_init_S"] + terms["depth_final_S"])
        + weights.alpha_T * (terms["depth_init_T"] + terms["depth_final_T"])
    )
    return LossBreakdown(total=total, **terms)
