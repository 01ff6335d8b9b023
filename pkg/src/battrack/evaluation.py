"""PR / SR / MPR / MSR and attribute breakdowns.

Boxes are (x, y, w, h) with a top-left origin. PR counts center errors
``<= tau``; SR counts IoU ``> theta`` (strict) and is summarized by the mean
over 21 thresholds. The "maximum" versions score each frame against the more
favourable of the two modality ground truths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PR_THRESHOLDS = np.arange(51, dtype=np.float64)
SR_THRESHOLDS = np.arange(21, dtype=np.float64) / 20.0
PR_HEADLINE = 20


class EvalError(ValueError):
    pass


def as_boxes(boxes, what: str = "boxes") -> np.ndarray:
    a = np.asarray(boxes, dtype=np.float64)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(0, 4)
    if a.ndim != 2 or a.shape[1] != 4:
        raise EvalError(f"{what} must have shape (n, 4), got {a.shape}")
    return a


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = as_boxes(pred, "predictions"), as_boxes(gt, "ground truth")
    if len(p) != len(g):
        raise EvalError(f"frame count mismatch: {len(p)} predicted vs {len(g)} ground-truth frames")
    return p, g


def iou(a, b) -> np.ndarray:
    """Row-wise IoU; 0 where the union is empty. Identical boxes give exactly 1."""
    a, b = _pair(a, b)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = iw * ih
    union = (ax2 - a[:, 0]) * (ay2 - a[:, 1]) + (bx2 - b[:, 0]) * (by2 - b[:, 1]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_error(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    ca = a[:, :2] + a[:, 2:] / 2
    cb = b[:, :2] + b[:, 2:] / 2
    return np.hypot(*(ca - cb).T)


def precision_from_errors(err: np.ndarray) -> np.ndarray:
    err = np.asarray(err, dtype=np.float64)
    if err.size == 0:
        return np.zeros_like(PR_THRESHOLDS)
    return (err[None, :] <= PR_THRESHOLDS[:, None]).mean(axis=1)


def success_from_ious(ious: np.ndarray) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return np.zeros_like(SR_THRESHOLDS)
    return (ious[None, :] > SR_THRESHOLDS[:, None]).mean(axis=1)


def precision_curve(pred, gt) -> tuple[np.ndarray, float]:
    curve = precision_from_errors(center_error(pred, gt))
    return curve, float(curve[PR_HEADLINE])


def success_curve(pred, gt) -> tuple[np.ndarray, float]:
    curve = success_from_ious(iou(pred, gt))
    return curve, float(curve.mean())


def mpr_msr(pred, gt_rgb, gt_tir) -> dict[str, object]:
    """Curves and headlines with per-frame min distance and max IoU over both ground truths."""
    _pair(pred, gt_rgb)
    _pair(pred, gt_tir)
    err = np.minimum(center_error(pred, gt_rgb), center_error(pred, gt_tir))
    ov = np.maximum(iou(pred, gt_rgb), iou(pred, gt_tir))
    pr, sr = precision_from_errors(err), success_from_ious(ov)
    return {"mpr_curve": pr, "mpr": float(pr[PR_HEADLINE]), "msr_curve": sr, "msr": float(sr.mean())}


@dataclass
class FrameScores:
    """Per-frame errors and overlaps against each modality's ground truth."""

    err_rgb: np.ndarray
    err_tir: np.ndarray
    iou_rgb: np.ndarray
    iou_tir: np.ndarray

    @classmethod
    def compute(cls, pred, gt_rgb, gt_tir=None) -> "FrameScores":
        gt_tir = gt_rgb if gt_tir is None else gt_tir
        return cls(center_error(pred, gt_rgb), center_error(pred, gt_tir), iou(pred, gt_rgb), iou(pred, gt_tir))

    @classmethod
    def concat(cls, parts: list["FrameScores"]) -> "FrameScores":
        if not parts:
            return cls(*(np.zeros(0) for _ in range(4)))
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("err_rgb", "err_tir", "iou_rgb", "iou_tir")))

    def __len__(self) -> int:
        return len(self.err_rgb)


@dataclass
class MetricReport:
    frames: int
    pr_curve: np.ndarray
    sr_curve: np.ndarray
    mpr_curve: np.ndarray
    msr_curve: np.ndarray
    curves: dict[str, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.curves = {"PR": self.pr_curve, "SR": self.sr_curve, "MPR": self.mpr_curve, "MSR": self.msr_curve}

    @classmethod
    def from_scores(cls, s: FrameScores) -> "MetricReport":
        # PR/SR are scored against the visible-light ground truth
        return cls(len(s), precision_from_errors(s.err_rgb), success_from_ious(s.iou_rgb),
                   precision_from_errors(np.minimum(s.err_rgb, s.err_tir)),
                   success_from_ious(np.maximum(s.iou_rgb, s.iou_tir)))

    @property
    def pr(self) -> float:
        return float(self.pr_curve[PR_HEADLINE])

    @property
    def sr(self) -> float:
        return float(self.sr_curve.mean())

    @property
    def mpr(self) -> float:
        return float(self.mpr_curve[PR_HEADLINE])

    @property
    def msr(self) -> float:
        return float(self.msr_curve.mean())

    def headlines(self) -> dict[str, float]:
        return {"PR": self.pr, "SR": self.sr, "MPR": self.mpr, "MSR": self.msr}

    @staticmethod
    def thresholds(metric: str) -> np.ndarray:
        return PR_THRESHOLDS if metric in ("PR", "MPR") else SR_THRESHOLDS


def report_for(preds: dict[str, np.ndarray], gts: dict[str, tuple[np.ndarray, np.ndarray]],
               names=None) -> MetricReport:
    """Metrics over the union of frames of the named sequences (all by default)."""
    names = sorted(gts) if names is None else list(names)
    parts = []
    for n in names:
        if n not in preds:
            raise EvalError(f"no result for sequence {n}")
        try:
            parts.append(FrameScores.compute(preds[n], *gts[n]))
        except EvalError as exc:
            raise EvalError(f"{n}: {exc}") from None
    return MetricReport.from_scores(FrameScores.concat(parts))


def attribute_report(preds: dict[str, np.ndarray], gts: dict[str, tuple[np.ndarray, np.ndarray]],
                     tags: dict[str, list[str]], attributes=None, known=None) -> dict[str, MetricReport]:
    """One report per attribute over the sequences that carry it.

    ``attributes`` filters the rows; names outside ``known`` raise. Attributes
    with no sequences are left out.
    """
    untagged = sorted(set(gts) - set(tags))
    if untagged:
        raise EvalError(f"sequence(s) without attribute tags: {', '.join(untagged)}")
    present = sorted({a for n in gts for a in tags[n]})
    known = set(present if known is None else known)
    wanted = present if attributes is None else list(attributes)
    unknown = [a for a in wanted if a not in known]
    if unknown:
        raise EvalError(f"unknown attribute(s): {', '.join(unknown)}")
    out = {}
    for a in wanted:
        names = [n for n in sorted(gts) if a in tags[n]]
        if names:
            out[a] = report_for(preds, gts, names)
    return out
