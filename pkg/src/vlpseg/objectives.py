"""BCE + Dice training loss and IoU evaluation metrics."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .errors import DataError, ShapeError, VlpSegError

BCE_EPS = 1e-7
REPORT_HEADER = "# vlpseg-iou-report v1"


class LossValue(NamedTuple):
    total: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor


def _check(p, y):
    if p.shape != y.shape:
        raise ShapeError(f"prediction {tuple(p.shape)} and target {tuple(y.shape)} differ")


def bce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over the last two dims; ``p`` is clamped away from 0 and 1."""
    _check(p, y)
    y = y.to(p.dtype)
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(y * p.log() + (1 - y) * (1 - p).log()).mean(dim=(-2, -1))


def dice_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check(p, y)
    y = y.to(p.dtype)
    inter = (p * y).sum(dim=(-2, -1))
    return 1 - (2 * inter + 1) / (p.sum(dim=(-2, -1)) + y.sum(dim=(-2, -1)) + 1)


def total_loss(logits: torch.Tensor, gt: torch.Tensor) -> LossValue:
    """Per-mask losses; leading batch dims are kept (the trainer averages them)."""
    _check(logits, gt)
    p = torch.sigmoid(logits)
    bce = bce_loss(p, gt)
    dice = dice_loss(p, gt)
    return LossValue(bce + dice, bce, dice)


def episode_iou(pred, gt, threshold: float = 0.5) -> float:
    """Foreground IoU of sigmoid(pred) > threshold against a binary mask; 1.0 if both are empty."""
    pred = torch.as_tensor(np.asarray(pred) if not torch.is_tensor(pred) else pred).detach().double()
    gt = torch.as_tensor(np.asarray(gt) if not torch.is_tensor(gt) else gt).detach().bool()
    _check(pred, gt)
    fg = torch.sigmoid(pred) > threshold
    union = (fg | gt).sum().item()
    if union == 0:
        return 1.0
    return (fg & gt).sum().item() / union


@dataclass
class IoUReport:
    per_class: dict[int, float]
    counts: dict[int, int]
    miou: float
    n_episodes: int
    skipped: int = 0
    meta: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [REPORT_HEADER]
        if self.meta:
            lines.append("# " + " ".join(f"{k}={v}" for k, v in self.meta.items()))
        lines.append(f"# n_episodes={self.n_episodes} skipped={self.skipped}")
        for cid in sorted(self.per_class):
            lines.append(f"class\t{cid}\t{self.per_class[cid]:.6f}\t{self.counts[cid]}")
        lines.append(f"miou\t{self.miou:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str, source: str = "<report>") -> "IoUReport":
        per_class, counts, meta, miou = {}, {}, {}, None
        n_episodes = skipped = 0
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        if k == "n_episodes":
                            n_episodes = int(v)
                        elif k == "skipped":
                            skipped = int(v)
                        else:
                            meta[k] = v
                continue
            cols = line.split("\t")
            try:
                if cols[0] == "class" and len(cols) == 4:
                    cid = int(cols[1])
                    per_class[cid] = float(cols[2])
                    counts[cid] = int(cols[3])
                elif cols[0] == "miou" and len(cols) == 2:
                    miou = float(cols[1])
                else:
                    raise ValueError
            except ValueError:
                raise DataError(f"{source}:{lineno}: cannot parse report line {line!r}") from None
        if miou is None:
            raise DataError(f"{source}: missing final 'miou' line")
        return cls(per_class, counts, miou, n_episodes, skipped, meta)

    @classmethod
    def load(cls, path) -> "IoUReport":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"report not found: {path}")
        return cls.from_text(path.read_text(), str(path))


def fold_miou(results, skipped: int = 0) -> IoUReport:
    """Class-balanced mIoU from ``(class_id, iou)`` pairs: mean per class, then across classes."""
    by_class = defaultdict(list)
    for cid, iou in results:
        by_class[int(cid)].append(float(iou))
    if not by_class:
        raise VlpSegError("cannot compute mIoU over an empty fold")
    per_class = {cid: float(np.mean(v)) for cid, v in by_class.items()}
    counts = {cid: len(v) for cid, v in by_class.items()}
    miou = float(np.mean(list(per_class.values())))
    return IoUReport(per_class, counts, miou, sum(counts.values()), skipped)
