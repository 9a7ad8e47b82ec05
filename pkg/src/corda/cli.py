"""Command-line entry points: gen-data, train, eval, inspect-weights.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import datasets
from .config import ExperimentConfig, load_experiment, save_experiment
from .datasets import DatasetManifest, Domain
from .errors import ConfigError, FormatError
from .metrics import default_subset
from .model import load_checkpoint
from .refinement import decoder_weights
from .selftrain import TrainingDiverged, Variant, collate, evaluate, train

log = logging.getLogger("corda")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def cmd_gen_data(args) -> int:
    if args.classes < 3:
        print(f"error: --classes must be >= 3, got {args.classes}", file=sys.stderr)
        return EXIT_USAGE
    try:
        src_cfg, tgt_cfg = datasets.preset(args.preset, args.seed, args.classes)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    dims = (args.size, args.size)
    for cfg, domain in ((src_cfg, Domain.SOURCE), (tgt_cfg, Domain.TARGET)):
        m = datasets.generate_synthetic_domain(
            cfg, args.count, out / domain.value, dims=dims, num_classes=args.classes,
            domain=domain, eval_count=args.eval_count,
        )
        print(f"{domain.value}: {len(m)} samples -> {m.root / datasets.MANIFEST_NAME}")
    return EXIT_OK


def _experiment_from_args(args) -> ExperimentConfig:
    exp = load_experiment(args.config)
    overrides = {}
    if args.variant:
        overrides["variant"] = Variant(args.variant)
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lr is not None:
        overrides["lr"] = args.lr
    if overrides:
        exp.train = replace(exp.train, **overrides)
    if args.out:
        exp.output_dir = args.out
    if args.eval_interval is not None:
        exp.eval_interval = args.eval_interval
    return exp


def cmd_train(args) -> int:
    try:
        exp = _experiment_from_args(args)
        source = DatasetManifest.load(exp.source)
        target = DatasetManifest.load(exp.target)
    except (ConfigError, FormatError, ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_experiment(exp, out / "experiment.json")
    try:
        result = train(exp.train, source, target, out, model_cfg=exp.model,
                       eval_interval=exp.eval_interval, resume=args.resume)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(result.report.table())
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _target_split(path, split):
    manifest = DatasetManifest.load(path)
    sub = manifest.split(split)
    return manifest, sub if len(sub) else manifest


def cmd_eval(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
        manifest, sub = _target_split(args.target, args.split)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    torch.use_deterministic_algorithms(True)
    samples = datasets.load_all(sub)
    subset = args.subset if args.subset is not None else default_subset(manifest.class_names)
    report = evaluate(model, samples, manifest.class_names, subset)
    print(report.table())
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    report.save(out)
    print(f"report: {out}")
    return EXIT_OK


def weight_maps(model, samples, d_min, d_max, epsilon=1e-6):
    """Difficulty weight map for each target sample (full resolution)."""
    model.eval()
    maps = []
    with torch.no_grad():
        for s in samples:
            b = collate([s], d_min, d_max)
            out = model(b.image, Domain.TARGET)
            size = tuple(b.image.shape[-2:])
            f_src = model.final_depth(out.F_depth_o, Domain.SOURCE, size)[:, 0]
            wmap = decoder_weights(f_src[0], out.depth_final[0, 0], b.depth[0], b.valid[0], d_min, d_max, epsilon)
            maps.append(wmap)
    return maps


def heatmap(w: torch.Tensor) -> np.ndarray:
    return np.rint(w.numpy().astype(np.float64) * 255).astype(np.uint8)


def cmd_inspect_weights(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
        manifest, sub = _target_split(args.target, args.split)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(sub) if args.limit is None else min(args.limit, len(sub))
    samples = [datasets.load_sample(sub, i) for i in range(n)]
    stats = []
    for rec, wmap in zip(sub.records, weight_maps(model, samples, manifest.d_min, manifest.d_max)):
        name = Path(rec.image).name
        Image.fromarray(heatmap(wmap.w), mode="L").save(out / name)
        w = wmap.w.numpy()
        stats.append({"file": name, "mean_w": float(w.mean()), "zero_fraction": float((w == 0).mean())})
    summary = {
        "mean_w": float(np.mean([s["mean_w"] for s in stats])) if stats else 1.0,
        "zero_fraction": float(np.mean([s["zero_fraction"] for s in stats])) if stats else 0.0,
        "samples": stats,
    }
    (out / "stats.json").write_text(json.dumps(summary, indent=2))
    print(f"{len(stats)} heatmaps -> {out}  mean_w={summary['mean_w']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic source/target benchmark")
    g.add_argument("--preset", default="default")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--eval-count", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run self-training from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out")
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the target split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--subset", type=int, nargs="*")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("inspect-weights", help="dump pseudo-label weight heatmaps")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--target", required=True)
    w.add_argument("--split", default="eval")
    w.add_argument("--limit", type=int)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_inspect_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
