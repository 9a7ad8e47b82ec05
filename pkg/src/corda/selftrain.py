"""Class-mix self-training with depth-guided pseudo-label re-weighting."""

from __future__ import annotations

import csv
import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasets import (
    IGNORE_INDEX,
    DatasetManifest,
    Domain,
    Sample,
    load_all,
    random_crop_pair,
    to_inverse_depth,
)
from .errors import ConfigError, ContractError
from .losses import LOSS_TERMS, LossBreakdown, LossWeights, total_loss
from .metrics import EvalReport, default_subset, new_confusion, update_confusion
from .model import CorDANet, ModelConfig, ModelOutput, load_checkpoint, save_checkpoint, upsample
from .refinement import decoder_weights

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", *LOSS_TERMS, "total", "mean_w", "miou")


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    SIMPLE_AUX = "simple_aux"
    CORDA_F = "corda_f"
    CORDA_FD = "corda_fd"

    @property
    def depth(self) -> bool:
        return self is not Variant.BASELINE

    @property
    def correlation(self) -> bool:
        return self in (Variant.CORDA_F, Variant.CORDA_FD)

    @property
    def refine(self) -> bool:
        return self is Variant.CORDA_FD


@dataclass
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 2
    lr: float = 2.5e-4
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    crop_size: int = 64
    threshold: float = 0.968
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    variant: Variant = Variant.CORDA_FD
    epsilon: float = 1e-6
    tie_depth_decoders: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.batch_size <= 0 or self.crop_size <= 0:
            raise ConfigError("batch_size and crop_size must be positive")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule


def poly_lr(iteration: int, base: float, power: float, max_iter: int) -> float:
    if iteration >= max_iter:
        return 0.0
    return base * (1.0 - iteration / max_iter) ** power


# ---------------------------------------------------------------------------
# pseudo-labels and mixing


@dataclass
class PseudoLabel:
    labels: torch.Tensor  # long, ... x H x W
    confident: torch.Tensor  # bool
    prob: torch.Tensor  # max softmax probability


def pseudo_labels_from_logits(logits: torch.Tensor, threshold: float) -> PseudoLabel:
    prob, labels = torch.softmax(logits.detach(), dim=-3).max(dim=-3)
    return PseudoLabel(labels=labels, confident=prob >= threshold, prob=prob)


@torch.no_grad()
def generate_pseudo_labels(model: CorDANet, images: torch.Tensor, threshold: float) -> PseudoLabel:
    was_training = model.training
    model.eval()
    try:
        out = model(images, Domain.TARGET)
    finally:
        model.train(was_training)
    return pseudo_labels_from_logits(out.sem_final, threshold)


@dataclass
class MixResult:
    image: torch.Tensor  # 3 x H x W
    label: torch.Tensor  # H x W
    weight: torch.Tensor  # H x W in [0, 1]
    mask: torch.Tensor  # bool, True where source pixels were pasted
    classes: list[int]


def select_mix_classes(src_label: torch.Tensor, rng: np.random.Generator) -> list[int]:
    present = [int(c) for c in torch.unique(src_label) if int(c) != IGNORE_INDEX]
    n = math.ceil(len(present) / 2)
    return sorted(int(c) for c in rng.choice(present, size=n, replace=False)) if n else []


def classmix(
    src_image: torch.Tensor,
    src_label: torch.Tensor,
    tgt_image: torch.Tensor,
    pseudo: PseudoLabel,
    rng: np.random.Generator | None = None,
    tgt_weight: torch.Tensor | None = None,
    classes: list[int] | None = None,
) -> MixResult:
    """Paste the pixels of half the source classes onto the target image.

    ``pseudo`` holds the single-image target pseudo-label. Pasted pixels get
    weight 1; target pixels get ``confident * tgt_weight``. ``classes``
    overrides the random class draw.
    """
    if src_image.shape != tgt_image.shape or src_label.shape != pseudo.labels.shape:
        raise ContractError("source and target dims differ")
    if src_label.shape != src_image.shape[-2:]:
        raise ContractError("label and image dims differ")
    if classes is None:
        if rng is None:
            raise ContractError("need rng or explicit classes")
        classes = select_mix_classes(src_label, rng)
    mask = torch.zeros_like(src_label, dtype=torch.bool)
    for c in classes:
        mask |= src_label == c
    tw = pseudo.confident.to(src_image.dtype)
    if tgt_weight is not None:
        tw = tw * tgt_weight.to(src_image.dtype)
    return MixResult(
        image=torch.where(mask, src_image, tgt_image),
        label=torch.where(mask, src_label, pseudo.labels),
        weight=torch.where(mask, torch.ones_like(tw), tw),
        mask=mask,
        classes=list(classes),
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    image: torch.Tensor  # B x 3 x H x W
    labels: torch.Tensor  # B x H x W long
    depth_inv: torch.Tensor  # B x H x W
    valid: torch.Tensor  # B x H x W bool
    depth: torch.Tensor  # B x H x W meters, 0 where invalid
    d_min: float = 1.0
    d_max: float = 80.0


def collate(samples: list[Sample], d_min: float, d_max: float) -> Batch:
    inv, valid = zip(*(to_inverse_depth(s.depth, d_min, d_max) for s in samples))
    return Batch(
        image=torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float().contiguous(),
        labels=torch.from_numpy(np.stack([s.semantics for s in samples])).long(),
        depth_inv=torch.from_numpy(np.stack(inv)).float(),
        valid=torch.from_numpy(np.stack(valid)),
        depth=torch.from_numpy(np.stack([s.depth for s in samples])).float(),
        d_min=d_min,
        d_max=d_max,
    )


def joint_forward(model: CorDANet, chunks: list[tuple[torch.Tensor, Domain]]) -> list[ModelOutput]:
    """Forward several image groups with one backbone pass.

    Equivalent to calling ``model(images, domain)`` per chunk: every layer
    up to the heads acts per image.
    """
    images = torch.cat([x for x, _ in chunks])
    size = tuple(images.shape[-2:])
    feats = model.backbone_forward(images)
    F_seg = model.seg_bottleneck(feats)
    F_depth = model.depth_bottleneck(feats)
    sem_init = model.sem_head_init(F_seg)
    F_seg_o, F_depth_o = model.distill(F_seg, F_depth)
    sem_final = model.sem_decoder(F_seg_o)
    outs, start = [], 0
    for x, domain in chunks:
        sl = slice(start, start + x.shape[0])
        start += x.shape[0]
        outs.append(ModelOutput(
            sem_init=upsample(sem_init[sl], size),
            depth_init=upsample(model.depth_head_init(domain)(F_depth[sl]), size),
            sem_final=upsample(sem_final[sl], size),
            depth_final=upsample(model.depth_decoder(domain)(F_depth_o[sl]), size),
            F_seg=F_seg[sl], F_depth=F_depth[sl], F_seg_o=F_seg_o[sl], F_depth_o=F_depth_o[sl],
        ))
    return outs


# ---------------------------------------------------------------------------
# one step


@dataclass
class StepResult:
    losses: LossBreakdown
    lr: float
    mean_w: float
    confident_fraction: float
    mix_masks: torch.Tensor | None = None


def configure_model(model: CorDANet, cfg: TrainConfig) -> CorDANet:
    model.use_correlation = cfg.variant.correlation
    return model


def make_optimizer(model: CorDANet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


@torch.no_grad()
def target_weights(model: CorDANet, batch_T: Batch, cfg: TrainConfig):
    """Pseudo-labels and per-pixel refinement weights for the target batch."""
    was_training = model.training
    model.eval()
    try:
        out = model(batch_T.image, Domain.TARGET)
        pseudo = pseudo_labels_from_logits(out.sem_final, cfg.threshold)
        if cfg.variant.refine:
            size = tuple(batch_T.image.shape[-2:])
            f_src = model.final_depth(out.F_depth_o, Domain.SOURCE, size)[:, 0]
            wmap = decoder_weights(f_src, out.depth_final[:, 0], batch_T.depth, batch_T.valid,
                                   batch_T.d_min, batch_T.d_max, cfg.epsilon)
            w = wmap.w
            mean_w = wmap.mean_valid
        else:
            w = torch.ones_like(pseudo.prob)
            mean_w = 1.0
    finally:
        model.train(was_training)
    return pseudo, w, mean_w


def train_step(
    model: CorDANet,
    batch_S: Batch,
    batch_T: Batch,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    iteration: int,
    rng: np.random.Generator,
) -> StepResult:
    configure_model(model, cfg)
    model.train()
    # (1)+(2) pseudo-labels and difficulty weights, no gradient
    pseudo, w, mean_w = target_weights(model, batch_T, cfg)
    # (3) class-mix
    mixes = [
        classmix(batch_S.image[i], batch_S.labels[i], batch_T.image[i],
                 PseudoLabel(pseudo.labels[i], pseudo.confident[i], pseudo.prob[i]),
                 rng, tgt_weight=w[i])
        for i in range(batch_S.image.shape[0])
    ]
    mixed_img = torch.stack([m.image for m in mixes])
    mixed_lbl = torch.stack([m.label for m in mixes])
    mixed_w = torch.stack([m.weight for m in mixes])
    # (4) source, mixed and unmixed target in one pass
    out_S, out_M, out_T = joint_forward(
        model, [(batch_S.image, Domain.SOURCE), (mixed_img, Domain.TARGET), (batch_T.image, Domain.TARGET)]
    )
    # (5) objective
    losses = total_loss(
        out_S, out_M, batch_S.labels, batch_S.depth_inv, mixed_lbl, mixed_w, batch_T.depth_inv,
        cfg.loss_weights, d_S_valid=batch_S.valid, d_T_valid=batch_T.valid, out_T_depth=out_T,
        depth_terms=cfg.variant.depth,
    )
    if not torch.isfinite(losses.total):
        raise TrainingDiverged(f"non-finite loss at iter {iteration}: {losses.as_floats()}")
    # (6) update
    lr = poly_lr(iteration, cfg.lr, cfg.power, cfg.iterations)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    optimizer.step()
    return StepResult(
        losses=losses,
        lr=lr,
        mean_w=mean_w,
        confident_fraction=float(pseudo.confident.float().mean()),
        mix_masks=torch.stack([m.mask for m in mixes]),
    )


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: CorDANet, images: torch.Tensor, batch_size: int = 25) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        preds = [model(images[i : i + batch_size], Domain.TARGET).sem_final.argmax(1)
                 for i in range(0, images.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(preds)


def evaluate(model: CorDANet, samples: list[Sample], class_names, subset=None) -> EvalReport:
    if subset is None:
        subset = default_subset(class_names)
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float()
    preds = predict(model, images).numpy()
    conf = new_confusion(len(class_names))
    for p, s in zip(preds, samples):
        update_confusion(conf, p, s.semantics)
    return EvalReport.from_confusion(conf, class_names, subset)


# ---------------------------------------------------------------------------
# full training run


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    report: EvalReport
    history: list[dict]


class _Sampler:
    def __init__(self, samples: list[Sample], cfg: TrainConfig, d_min, d_max):
        self.samples, self.cfg, self.d_min, self.d_max = samples, cfg, d_min, d_max

    def draw(self, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, len(self.samples), size=self.cfg.batch_size)
        crops = [random_crop_pair(self.samples[i], self.cfg.crop_size, rng) for i in idx]
        return collate(crops, self.d_min, self.d_max)


def build_model(model_cfg: ModelConfig, cfg: TrainConfig) -> CorDANet:
    torch.manual_seed(cfg.seed)
    model = CorDANet(model_cfg)
    if cfg.tie_depth_decoders:
        model.tie_depth_decoders()
    return configure_model(model, cfg)


def train(
    cfg: TrainConfig,
    source: DatasetManifest,
    target: DatasetManifest,
    out_dir,
    model_cfg: ModelConfig | None = None,
    eval_interval: int = 0,
    resume=None,
) -> TrainResult:
    """Run self-training; writes checkpoint.pt, train_log.csv and eval_report.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    if source.num_classes != target.num_classes:
        raise ConfigError("source and target class counts differ")
    if model_cfg is None:
        model_cfg = ModelConfig(num_classes=source.num_classes, input_dims=(cfg.crop_size, cfg.crop_size))

    src_train = load_all(source.split("train"))
    tgt_train = load_all(target.split("train"))
    tgt_eval = load_all(target.split("eval"))
    if not src_train or not tgt_train:
        raise ConfigError("empty training split")
    if not tgt_eval:
        log.warning("target manifest has no eval split; evaluating on train records")
        tgt_eval = tgt_train
    class_names = target.class_names

    rng = np.random.default_rng(cfg.seed)
    model = build_model(model_cfg, cfg)
    optimizer = make_optimizer(model, cfg)
    start = 0
    history: list[dict] = []
    log_path = out_dir / "train_log.csv"
    if resume is not None:
        model, payload = load_checkpoint(resume)
        configure_model(model, cfg)
        optimizer = make_optimizer(model, cfg)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start = int(payload["iteration"])
        extra = payload.get("extra", {})
        if "rng" in extra:
            rng.bit_generator.state = extra["rng"]
        if "torch_rng" in extra:
            torch.set_rng_state(extra["torch_rng"])
        if log_path.exists():
            with open(log_path, newline="") as fh:
                history = [row for row in csv.DictReader(fh) if int(row["iter"]) < start]

    sampler_S = _Sampler(src_train, cfg, source.d_min, source.d_max)
    sampler_T = _Sampler(tgt_train, cfg, target.d_min, target.d_max)
    report = None
    t0 = time.perf_counter()
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow(row)
        for it in range(start, cfg.iterations):
            batch_S = sampler_S.draw(rng)
            batch_T = sampler_T.draw(rng)
            try:
                step = train_step(model, batch_S, batch_T, cfg, optimizer, it, rng)
            except TrainingDiverged:
                save_checkpoint(out_dir / "diverged.pt", model, it)
                raise
            row = {"iter": it, "lr": repr(step.lr), "mean_w": repr(step.mean_w), "miou": ""}
            row.update({k: repr(v) for k, v in step.losses.as_floats().items()})
            last = it == cfg.iterations - 1
            if last or (eval_interval and (it + 1) % eval_interval == 0):
                report = evaluate(model, tgt_eval, class_names)
                row["miou"] = repr(report.miou)
                log.info("iter %d  total %.4f  mIoU %.4f  (%.0fs)", it + 1, step.losses.total.item(),
                         report.miou, time.perf_counter() - t0)
            writer.writerow(row)
            history.append(row)

    if report is None:
        report = evaluate(model, tgt_eval, class_names)
    ckpt = save_checkpoint(
        out_dir / "checkpoint.pt", model, cfg.iterations, optimizer,
        extra={"train_config": _jsonable(asdict(cfg)), "rng": rng.bit_generator.state,
               "torch_rng": torch.get_rng_state(), "final_miou": report.miou},
    )
    report.save(out_dir / "eval_report.json")
    return TrainResult(checkpoint=ckpt, log=log_path, report=report, history=history)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj
