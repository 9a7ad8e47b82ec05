"""The four-variant ablation grid on the synthetic benchmark."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datasets import MANIFEST_NAME, DatasetManifest, Domain, generate_synthetic_domain, preset
from .losses import LossWeights
from .model import ModelConfig
from .selftrain import TrainConfig, Variant, train

ABLATION_ORDER = (Variant.BASELINE, Variant.SIMPLE_AUX, Variant.CORDA_F, Variant.CORDA_FD)


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    iterations: int = 4000
    lr: float = 0.01
    crop_size: int = 48
    alpha_S: float = 1.0
    alpha_T: float = 1.0
    data_seed: int = 0
    train_count: int = 200
    eval_count: int = 50
    size: int = 64
    min_margin: float = 5.0  # mIoU points, FD over baseline

    def train_config(self, variant: Variant, seed: int) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, lr=self.lr, crop_size=self.crop_size, seed=seed, variant=variant,
            loss_weights=LossWeights(alpha_S=self.alpha_S, alpha_T=self.alpha_T),
        )


def ensure_benchmark(root, cfg: AblationConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """Load the benchmark under ``root``, generating it first if absent."""
    root = Path(root)
    src_cfg, tgt_cfg = preset("default", cfg.data_seed)
    out = []
    for dcfg, domain in ((src_cfg, Domain.SOURCE), (tgt_cfg, Domain.TARGET)):
        d = root / domain.value
        if not (d / MANIFEST_NAME).is_file():
            generate_synthetic_domain(dcfg, cfg.train_count, d, dims=(cfg.size, cfg.size),
                                      domain=domain, eval_count=cfg.eval_count)
        out.append(DatasetManifest.load(d))
    return out[0], out[1]


@dataclass
class AblationResult:
    miou: dict[str, list[float]] = field(default_factory=dict)  # variant -> per-seed mIoU points
    seconds: float = 0.0

    def median(self, variant: Variant) -> float:
        return statistics.median(self.miou[variant.value])

    def ordering_holds(self) -> bool:
        meds = [self.median(v) for v in ABLATION_ORDER]
        return all(a <= b for a, b in zip(meds, meds[1:]))

    def margin(self) -> float:
        return self.median(Variant.CORDA_FD) - self.median(Variant.BASELINE)

    def table(self) -> str:
        lines = [f"{'variant':<11} " + " ".join(f"seed{i}" for i in range(len(next(iter(self.miou.values())))))
                 + "  median"]
        for v in ABLATION_ORDER:
            runs = " ".join(f"{x:5.1f}" for x in self.miou[v.value])
            lines.append(f"{v.value:<11} {runs}  {self.median(v):6.1f}")
        return "\n".join(lines)


def run_grid(cfg: AblationConfig, data_root, out_root, progress=print) -> AblationResult:
    source, target = ensure_benchmark(data_root, cfg)
    out_root = Path(out_root)
    model_cfg = ModelConfig(num_classes=source.num_classes, input_dims=(cfg.crop_size, cfg.crop_size))
    result = AblationResult()
    start = time.perf_counter()
    for v in ABLATION_ORDER:
        result.miou[v.value] = []
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            run = train(cfg.train_config(v, seed), source, target, out_root / f"{v.value}_s{seed}",
                        model_cfg=model_cfg)
            result.miou[v.value].append(100.0 * run.report.miou)
            progress(f"{v.value} seed={seed} mIoU={100 * run.report.miou:.1f} ({time.perf_counter() - t0:.0f}s)")
    result.seconds = time.perf_counter() - start
    (out_root / "ablation.json").write_text(json.dumps(
        {"config": asdict(cfg), "miou": result.miou, "seconds": result.seconds}, indent=2))
    return result
