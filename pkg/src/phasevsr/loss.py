"""Deep-supervised L1 objective summed over refinement stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ShapeError

REDUCTIONS = ("sum", "mean")


@dataclass
class LossReport:
    per_stage: list
    total: float
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_stage": [{"main": m, "aux_f": f, "aux_b": b} for m, f, b in self.per_stage],
        }


def stage_l1(pred, target, reduction: str = "sum") -> torch.Tensor:
    """L1 distance averaged over frames.

    With ``reduction="sum"`` each frame contributes the sum of absolute pixel
    differences and only the frame (and batch) count normalises. Inputs are
    ``(..., T, H, W)``; every axis before the last two is averaged.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.dim() < 2:
        raise ShapeError(f"expected at least 2-D frames, got shape {tuple(pred.shape)}")
    diff = (pred - target).abs()
    if reduction == "mean":
        return diff.mean()
    if reduction != "sum":
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    per_frame = diff.sum(dim=(-2, -1))
    return per_frame.mean() if per_frame.dim() else per_frame


def total_loss(out, target, reduction: str = "sum") -> LossReport:
    """Sum of main and both auxiliary L1 terms over every stage of ``out``."""
    stages = len(out.sr)
    if stages == 0 or len(out.aux_f) != stages or len(out.aux_b) != stages:
        raise ShapeError(
            f"stage lists must share a non-zero length, got sr={len(out.sr)}, "
            f"aux_f={len(out.aux_f)}, aux_b={len(out.aux_b)}")
    terms = []
    per_stage = []
    for sr, f, b in zip(out.sr, out.aux_f, out.aux_b):
        if f is None or b is None:
            raise ShapeError("missing auxiliary output")
        triple = (stage_l1(sr, target, reduction), stage_l1(f, target, reduction), stage_l1(b, target, reduction))
        terms.extend(triple)
        per_stage.append(tuple(float(t.detach()) for t in triple))
    total = torch.stack(terms).sum()
    return LossReport(per_stage=per_stage, total=float(total.detach()), tensor=total)
