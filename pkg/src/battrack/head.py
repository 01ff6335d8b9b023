"""Fully-convolutional centre head over the search-token grid, and box decoding."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .synthdata import CropWindow
from .tensor import Tensor


@dataclass
class HeadParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    score_w: Tensor
    score_b: Tensor
    offset_w: Tensor
    offset_b: Tensor
    size_w: Tensor
    size_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"head.{f.name}": getattr(self, f.name) for f in fields(self)}

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())


@dataclass
class HeadMaps:
    """Activated head outputs: score (B, G, G) in (0, 1), offset (B, 2, G, G)
    in (-0.5, 0.5) as (dx, dy) cells, size (B, 2, G, G) in (0, 1) as (w, h)
    fractions of the search size."""

    score: Tensor
    offset: Tensor
    size: Tensor

    def numpy(self, index: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.score.data[index], self.offset.data[index], self.size.data[index]


def init_head(d_t: int, channels: int, rng: np.random.Generator, trainable: bool = True) -> HeadParams:
    def conv(o, c, k):
        std = np.sqrt(2.0 / (c * k * k))
        return Tensor(rng.normal(0.0, std, (o, c, k, k)), requires_grad=trainable)

    def zeros(n, value=0.0):
        return Tensor(np.full(n, value), requires_grad=trainable)

    return HeadParams(
        conv1_w=conv(channels, d_t, 3), conv1_b=zeros(channels),
        conv2_w=conv(channels, channels, 3), conv2_b=zeros(channels),
        # score prior of 0.1 keeps the focal loss sane at step 0
        score_w=conv(1, channels, 1), score_b=zeros(1, -2.19),
        offset_w=conv(2, channels, 1), offset_b=zeros(2),
        size_w=conv(2, channels, 1), size_b=zeros(2),
    )


def tokens_to_grid(search_tokens: Tensor) -> Tensor:
    b, n, d = search_tokens.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise T.ShapeError("tokens_to_grid", search_tokens.shape)
    return search_tokens.transpose(0, 2, 1).reshape(b, d, g, g)


def head_forward(search_tokens: Tensor, p: HeadParams) -> HeadMaps:
    """(B, G*G, d) search tokens -> score, offset and size maps on the G x G grid."""
    x = tokens_to_grid(search_tokens)
    h = T.relu(T.conv2d(x, p.conv1_w, p.conv1_b, padding=1))
    h = T.relu(T.conv2d(h, p.conv2_w, p.conv2_b, padding=1))
    score = T.sigmoid(T.conv2d(h, p.score_w, p.score_b))
    b, _, g, _ = score.shape
    offset = T.sigmoid(T.conv2d(h, p.offset_w, p.offset_b)) - 0.5
    size = T.sigmoid(T.conv2d(h, p.size_w, p.size_b))
    return HeadMaps(score.reshape(b, g, g), offset, size)


def clip_box(box, frame_size) -> np.ndarray:
    """Clip an (x, y, w, h) box to a (width, height) frame."""
    width, height = frame_size
    x, y, w, h = (float(v) for v in box)
    x1, y1 = min(max(x, 0.0), width), min(max(y, 0.0), height)
    x2, y2 = min(max(x + w, 0.0), width), min(max(y + h, 0.0), height)
    return np.array([x1, y1, x2 - x1, y2 - y1])


def decode_box(score: np.ndarray, offset: np.ndarray, size: np.ndarray, search_size: int,
               window: CropWindow | None = None, frame_size=None) -> np.ndarray:
    """Box at the score peak (ties go to the lowest row-major cell).

    Centre = (cell + 0.5 + offset) * stride in search-patch pixels; size is the
    size map at the peak times ``search_size``.  The box is mapped through
    ``window`` (identity when None) and clipped to ``frame_size`` if given.
    """
    score = np.asarray(score)
    if offset.shape[1:] != score.shape or size.shape[1:] != score.shape:
        raise T.ShapeError("decode_box", score.shape, offset.shape, size.shape)
    g = score.shape[0]
    stride = search_size / g
    r, c = divmod(int(np.argmax(score)), score.shape[1])
    cx = (c + 0.5 + offset[0, r, c]) * stride
    cy = (r + 0.5 + offset[1, r, c]) * stride
    w = size[0, r, c] * search_size
    h = size[1, r, c] * search_size
    box = np.array([cx - w / 2, cy - h / 2, w, h])
    if window is not None:
        box = window.to_frame(box)
    if frame_size is not None:
        box = clip_box(box, frame_size)
    return box
