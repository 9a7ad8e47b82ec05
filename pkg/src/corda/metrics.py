"""Confusion-matrix based IoU / mIoU evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import IGNORE_INDEX
from .errors import ContractError


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def update_confusion(conf: np.ndarray, pred, gt, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Add one prediction/ground-truth pair; rows are ground truth, columns prediction."""
    n = conf.shape[0]
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ContractError("pred and gt sizes differ")
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    if ((gt < 0) | (gt >= n)).any() or ((pred < 0) | (pred >= n)).any():
        raise ContractError(f"class ids outside 0..{n - 1}")
    conf += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    return conf


def iou_per_class(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN marks classes absent from both gt and prediction."""
    conf = np.asarray(conf, dtype=np.float64)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    iou = np.full(conf.shape[0], np.nan)
    np.divide(inter, union, out=iou, where=union > 0)
    return iou


def mean_iou(conf: np.ndarray, subset: Sequence[int] | None = None) -> float:
    iou = iou_per_class(conf)
    if subset is not None:
        subset = list(subset)
        if any(c < 0 or c >= len(iou) for c in subset):
            raise ContractError(f"subset {subset} outside 0..{len(iou) - 1}")
        iou = iou[subset]
    iou = iou[~np.isnan(iou)]
    if iou.size == 0:
        raise ContractError("no defined IoU in the evaluated class set")
    return float(iou.mean())


@dataclass
class EvalReport:
    class_names: list[str]
    iou: list[float | None]
    miou: float
    miou_subset: float
    subset: list[int]

    @classmethod
    def from_confusion(cls, conf, class_names, subset) -> "EvalReport":
        iou = iou_per_class(conf)
        return cls(
            class_names=list(class_names),
            iou=[None if np.isnan(v) else float(v) for v in iou],
            miou=mean_iou(conf),
            miou_subset=mean_iou(conf, subset),
            subset=list(subset),
        )

    def to_json(self) -> dict:
        return {
            "class_names": self.class_names,
            "iou": self.iou,
            "mIoU": self.miou,
            "mIoU_subset": self.miou_subset,
            "subset": self.subset,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def table(self) -> str:
        """Per-class IoU table in percent, one column per class."""
        starred = [n if i in self.subset else n + "*" for i, n in enumerate(self.class_names)]
        width = max(7, *(len(n) + 1 for n in starred))
        head = "".join(f"{n:>{width}}" for n in starred) + f"{'mIoU*':>8}{'mIoU':>8}"
        vals = "".join(f"{'-' if v is None else f'{100 * v:.1f}':>{width}}" for v in self.iou)
        vals += f"{100 * self.miou_subset:8.1f}{100 * self.miou:8.1f}"
        return head + "\n" + vals


def default_subset(class_names: Sequence[str]) -> list[int]:
    """Classes counted in mIoU*: everything except thin pole-like structures."""
    return [i for i, n in enumerate(class_names) if not n.startswith("pole")]
