"""Run the baseline / simple_aux / corda_f / corda_fd grid and print the table.

    python scripts/run_ablation.py --data runs/bench --out runs/ablation
"""

import argparse
import logging
import sys
from dataclasses import fields

from corda.experiments import AblationConfig, run_grid


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="runs/bench", help="benchmark root (generated if missing)")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seeds", type=int, nargs="+")
    for f in fields(AblationConfig):
        if f.name != "seeds":
            p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), dest=f.name)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    overrides = {k: v for k, v in vars(args).items() if v is not None and k not in ("data", "out")}
    if "seeds" in overrides:
        overrides["seeds"] = tuple(overrides["seeds"])
    cfg = AblationConfig(**overrides)
    res = run_grid(cfg, args.data, args.out)
    print(res.table())
    print(f"ordering {'holds' if res.ordering_holds() else 'violated'}; "
          f"FD - baseline = {res.margin():+.1f} points; {res.seconds / 60:.1f} min")
    return 0 if res.ordering_holds() and res.margin() >= cfg.min_margin else 1


if __name__ == "__main__":
    sys.exit(main())
