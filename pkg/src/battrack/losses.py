"""Tracking loss: weighted focal classification + GIoU + L1 box regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .head import HeadMaps
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    focal_alpha: float = 2.0
    focal_gamma: float = 4.0
    sigma_factor: float = 1.0 / 12.0  # Gaussian sigma as a fraction of the search size

    def __post_init__(self):
        for name in ("lambda_iou", "lambda_l1", "focal_alpha", "focal_gamma", "sigma_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def box_iou(a, b) -> float:
    """IoU of two (x, y, w, h) boxes; 0 when the union is empty."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def giou_xyxy(p: list[Tensor], g: np.ndarray) -> Tensor:
    """Generalized IoU between predicted corners ``p`` = [x1, y1, x2, y2] (each (B,))
    and fixed ground-truth corners ``g`` of shape (B, 4)."""
    px1, py1, px2, py2 = p
    gx1, gy1, gx2, gy2 = (T.Tensor(g[:, i]) for i in range(4))
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = area_p + area_g - inter
    enclose = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (T.maximum(py2, gy2) - T.minimum(py1, gy1))
    return inter / union - (enclose - union) / enclose


def gaussian_target(centers: np.ndarray, grid: int, search_size: int, sigma_factor: float):
    """Heatmaps (B, G, G) peaking at exactly 1 on the cell containing each centre."""
    stride = search_size / grid
    cells = np.clip(np.floor(centers / stride).astype(np.int64), 0, grid - 1)  # (B, 2) as (col, row)
    sigma_cells = sigma_factor * search_size / stride
    ii, jj = np.mgrid[0:grid, 0:grid]
    d2 = (ii[None] - cells[:, 1, None, None]) ** 2 + (jj[None] - cells[:, 0, None, None]) ** 2
    if sigma_cells > 0:
        heat = np.exp(-d2 / (2.0 * sigma_cells ** 2))
    else:
        heat = (d2 == 0).astype(np.float64)
    return heat, cells


def focal_loss(score: Tensor, target: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Penalty-reduced focal loss on a probability map against a Gaussian heatmap."""
    p = T.clip(score, 1e-4, 1.0 - 1e-4)
    pos = (target == 1.0).astype(np.float64)
    neg_weight = (1.0 - pos) * (1.0 - target) ** gamma
    pos_term = T.log(p) * T.power(1.0 - p, alpha) * pos
    neg_term = T.log(1.0 - p) * T.power(p, alpha) * neg_weight
    num_pos = max(pos.sum(), 1.0)
    return (pos_term.sum() + neg_term.sum()) * (-1.0 / num_pos)


def compute_loss(maps: HeadMaps, gt_boxes, search_size: int, cfg: LossConfig = LossConfig()):
    """Total loss and its components for ground-truth boxes given in search-patch pixels.

    Offset and size are read at the ground-truth centre cell, so the L1 term
    also supervises the offset map.
    """
    gt = np.atleast_2d(np.asarray(gt_boxes, dtype=np.float64))
    if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
        raise ValueError("degenerate ground-truth box (zero width or height)")
    b, g, _ = maps.score.shape
    if gt.shape[0] != b:
        raise T.ShapeError("compute_loss", maps.score.shape, gt.shape)
    centers = gt[:, :2] + gt[:, 2:] / 2
    heat, cells = gaussian_target(centers, g, search_size, cfg.sigma_factor)
    l_cls = focal_loss(maps.score, heat, cfg.focal_alpha, cfg.focal_gamma)

    bi = np.arange(b)
    col, row = cells[:, 0], cells[:, 1]
    ox = maps.offset[bi, 0, row, col]
    oy = maps.offset[bi, 1, row, col]
    w = maps.size[bi, 0, row, col]
    h = maps.size[bi, 1, row, col]
    cx = (ox + (col + 0.5)) * (1.0 / g)
    cy = (oy + (row + 0.5)) * (1.0 / g)
    pred = [cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5]
    gt_xyxy = np.concatenate([gt[:, :2], gt[:, :2] + gt[:, 2:]], axis=1) / search_size

    l_iou = (1.0 - giou_xyxy(pred, gt_xyxy)).mean()
    pred_mat = T.concat([c.reshape(b, 1) for c in pred], axis=1)
    l_l1 = T.tabs(pred_mat - gt_xyxy).mean()
    total = l_cls + l_iou * cfg.lambda_iou + l_l1 * cfg.lambda_l1
    parts = {"cls": l_cls.item(), "iou": l_iou.item(), "l1": l_l1.item(), "total": total.item()}
    return total, parts
