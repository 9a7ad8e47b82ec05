"""Correlation-aware dual-task segmentation network.

Layout (all modules named by their checkpoint path)::

    image -> backbone -> seg_bottleneck  -> F_seg   -> sem_head_init              -> sem_init
                      -> depth_bottleneck -> F_depth -> depth_head_init_{src,tgt}  -> depth_init
          (F_seg, F_depth) -> corr -> (F_seg_o, F_depth_o)
          F_seg_o   -> sem_decoder                -> sem_final
          F_depth_o -> depth_decoder_{src,tgt}    -> depth_final

Semantic heads and the correlation module are shared between domains; depth
heads and depth decoders are per domain.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .datasets import Domain
from .errors import ConfigError, ContractError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_classes: int = 5
    input_dims: tuple[int, int] = (64, 64)
    # (out_channels, stride) per encoder block
    backbone: list[tuple[int, int]] = field(
        default_factory=lambda: [(16, 2), (32, 2), (48, 2), (64, 1)]
    )
    feature_channels: int = 64
    groups: int = 8  # GroupNorm groups in the encoder

    def __post_init__(self):
        self.input_dims = tuple(self.input_dims)
        self.backbone = [tuple(b) for b in self.backbone]
        if self.feature_channels <= 0:
            raise ConfigError("feature_channels must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        h, w = self.input_dims
        if h % self.stride or w % self.stride:
            raise ConfigError(f"total stride {self.stride} must divide input dims {self.input_dims}")

    @property
    def stride(self) -> int:
        s = 1
        for _, st in self.backbone:
            s *= st
        return s

    @property
    def backbone_channels(self) -> int:
        return self.backbone[-1][0]


@dataclass
class ModelOutput:
    sem_init: torch.Tensor  # B x C x H x W logits
    depth_init: torch.Tensor  # B x 1 x H x W
    sem_final: torch.Tensor
    depth_final: torch.Tensor
    F_seg: torch.Tensor  # B x F x h x w
    F_depth: torch.Tensor
    F_seg_o: torch.Tensor
    F_depth_o: torch.Tensor


def _conv_block(cin, cout, stride, groups):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(min(groups, cout), cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Sequential):
    def __init__(self, cfg: ModelConfig):
        layers, cin = [], 3
        for cout, stride in cfg.backbone:
            layers.append(_conv_block(cin, cout, stride, cfg.groups))
            cin = cout
        super().__init__(*layers)


class TaskCorrelation(nn.Module):
    """Residual cross-task attention.

    F_seg_o   = F_seg   + W_d1(F_depth) * sigmoid(W_d2(F_depth))
    F_depth_o = F_depth + W_s1(F_seg)   * sigmoid(W_s2(F_seg))
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.W_d1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.W_d2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.W_s1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.W_s2 = nn.Conv2d(channels, channels, 3, padding=1)
        # start from the no-distillation identity
        for conv in (self.W_d1, self.W_s1):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, F_seg, F_depth):
        if F_seg.shape[1] != self.channels or F_depth.shape[1] != self.channels:
            raise ContractError(
                f"expected {self.channels} channels, got {F_seg.shape[1]} and {F_depth.shape[1]}"
            )
        F_seg_o = F_seg + self.W_d1(F_depth) * torch.sigmoid(self.W_d2(F_depth))
        F_depth_o = F_depth + self.W_s1(F_seg) * torch.sigmoid(self.W_s2(F_seg))
        return F_seg_o, F_depth_o


def correlation_distill(F_seg, F_depth, params: TaskCorrelation):
    return params(F_seg, F_depth)


def _decoder(channels, out):
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(channels, out, 1),
    )


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _check_domain(domain) -> Domain:
    try:
        return Domain(domain)
    except ValueError as exc:
        raise ContractError(f"unknown domain {domain!r}") from exc


class CorDANet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        fb, fc, nc = cfg.backbone_channels, cfg.feature_channels, cfg.num_classes
        self.backbone = Backbone(cfg)
        self.seg_bottleneck = nn.Sequential(nn.Conv2d(fb, fc, 3, padding=1), nn.ReLU(inplace=True))
        self.depth_bottleneck = nn.Sequential(nn.Conv2d(fb, fc, 3, padding=1), nn.ReLU(inplace=True))
        self.sem_head_init = nn.Conv2d(fc, nc, 1)
        self.depth_head_init_src = nn.Conv2d(fc, 1, 1)
        self.depth_head_init_tgt = nn.Conv2d(fc, 1, 1)
        self.corr = TaskCorrelation(fc)
        self.sem_decoder = _decoder(fc, nc)
        self.depth_decoder_src = _decoder(fc, 1)
        self.depth_decoder_tgt = _decoder(fc, 1)
        # False bypasses the correlation module (SimpleAux / baseline).
        self.use_correlation = True

    # -- stages --------------------------------------------------------

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ContractError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        s = self.cfg.stride
        if images.shape[-2] % s or images.shape[-1] % s:
            raise ContractError(f"input dims {tuple(images.shape[-2:])} not divisible by stride {s}")
        return self.backbone(images)

    def depth_head_init(self, domain) -> nn.Module:
        return self.depth_head_init_src if _check_domain(domain) is Domain.SOURCE else self.depth_head_init_tgt

    def depth_decoder(self, domain) -> nn.Module:
        return self.depth_decoder_src if _check_domain(domain) is Domain.SOURCE else self.depth_decoder_tgt

    def intermediate_stage(self, features, domain, size):
        head = self.depth_head_init(domain)
        F_seg = self.seg_bottleneck(features)
        F_depth = self.depth_bottleneck(features)
        sem_init = upsample(self.sem_head_init(F_seg), size)
        depth_init = upsample(head(F_depth), size)
        return sem_init, depth_init, F_seg, F_depth

    def distill(self, F_seg, F_depth):
        if not self.use_correlation:
            return F_seg, F_depth
        return correlation_distill(F_seg, F_depth, self.corr)

    def final_stage(self, F_seg_o, F_depth_o, domain, size):
        decoder = self.depth_decoder(domain)
        sem_final = upsample(self.sem_decoder(F_seg_o), size)
        depth_final = upsample(decoder(F_depth_o), size)
        return sem_final, depth_final

    def final_depth(self, F_depth_o, domain, size) -> torch.Tensor:
        return upsample(self.depth_decoder(domain)(F_depth_o), size)

    def forward(self, images: torch.Tensor, domain=Domain.SOURCE) -> ModelOutput:
        domain = _check_domain(domain)
        size = tuple(images.shape[-2:])
        feats = self.backbone_forward(images)
        sem_init, depth_init, F_seg, F_depth = self.intermediate_stage(feats, domain, size)
        F_seg_o, F_depth_o = self.distill(F_seg, F_depth)
        sem_final, depth_final = self.final_stage(F_seg_o, F_depth_o, domain, size)
        return ModelOutput(sem_init, depth_init, sem_final, depth_final, F_seg, F_depth, F_seg_o, F_depth_o)

    def tie_depth_decoders(self) -> None:
        """Copy source depth head/decoder parameters into the target ones."""
        self.depth_head_init_tgt.load_state_dict(self.depth_head_init_src.state_dict())
        self.depth_decoder_tgt.load_state_dict(self.depth_decoder_src.state_dict())


# ---------------------------------------------------------------------------
# checkpoints


def canonical_state(model: CorDANet) -> dict[str, torch.Tensor]:
    return {k.replace(".", "/"): v.detach().clone() for k, v in model.state_dict().items()}


def save_checkpoint(path, model: CorDANet, iteration: int = 0, optimizer=None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "use_correlation": model.use_correlation,
        "params": canonical_state(model),
        "iteration": iteration,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[CorDANet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    model = CorDANet(ModelConfig(**payload["model_config"]))
    model.load_state_dict({k.replace("/", "."): v for k, v in payload["params"].items()})
    model.use_correlation = payload["use_correlation"]
    return model, payload
