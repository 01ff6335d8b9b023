"""Dual-stream BAT model: cross-prompted encoder, fused head, training and inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .adapter import (RGB_TO_TIR, SINGLE_DIRECTION, STAGES, TIR_TO_RGB, AdapterParams, AdapterPlan,
                      adapter_forward, build_adapter_plan)
from .backbone import (BackboneConfig, BackboneParams, LayerParams, TokenState, attention_branch,
                       backbone_forward, init_backbone, mlp_branch, patchify_and_embed)
from .config import RunConfig
from .head import HeadMaps, HeadParams, decode_box, head_forward, init_head
from .losses import LossConfig, compute_loss
from .optim import AdamW
from .synthdata import (CropWindow, SequenceRecord, crop_window, mean_bordered, sample_bordered,
                        sample_window)
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class DualState:
    """Both streams stacked on the batch axis: RGB rows first, then TIR rows.

    The frozen layers are shared, so one stacked pass serves both streams.
    """

    tokens: Tensor  # (2B, t_n, d_t)
    num_template: int
    layer: int = 0  # encoder layers applied so far

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[0] % 2:
            raise T.ShapeError("DualState", self.tokens.shape)

    @classmethod
    def from_streams(cls, x_rgb: TokenState, x_tir: TokenState, layer: int = 0) -> "DualState":
        if x_rgb.tokens.shape != x_tir.tokens.shape:
            raise T.ShapeError("DualState", x_rgb.tokens.shape, x_tir.tokens.shape)
        return cls(T.concat([x_rgb.tokens, x_tir.tokens], axis=0), x_rgb.num_template, layer)

    @property
    def batch(self) -> int:
        return self.tokens.shape[0] // 2

    @property
    def x_rgb(self) -> TokenState:
        return TokenState(self.tokens[:self.batch], self.num_template)

    @property
    def x_tir(self) -> TokenState:
        return TokenState(self.tokens[self.batch:], self.num_template)

    @property
    def search(self) -> Tensor:
        """Search tokens of both streams, still stacked."""
        return self.tokens[:, self.num_template:, :]


@dataclass
class PlanSlice:
    """Adapters active in one encoder layer, keyed by (stage, direction)."""

    layer: int
    prompts: dict[tuple[str, str], AdapterParams]
    shared: bool = True


def plan_slice(plan: AdapterPlan, layer: int) -> PlanSlice:
    prompts = {}
    for stage in STAGES:
        for direction in (TIR_TO_RGB, RGB_TO_TIR):
            a = plan.adapter_for(layer, stage, direction)
            if a is not None:
                prompts[(stage, direction)] = a
    return PlanSlice(layer, prompts, plan.shared)


def _prompts(x: Tensor, b: int, sl: PlanSlice, stage: str) -> Tensor | None:
    """Cross-stream prompt for the stacked state: rows [:b] feed TIR, rows [b:] feed RGB."""
    to_rgb = sl.prompts.get((stage, TIR_TO_RGB))
    to_tir = sl.prompts.get((stage, RGB_TO_TIR))
    if to_rgb is None and to_tir is None:
        return None
    if to_rgb is not None and to_rgb is to_tir:
        p = adapter_forward(x, to_rgb)
        return T.concat([p[b:], p[:b]], axis=0)
    zeros = Tensor(np.zeros((b,) + x.shape[1:]))
    p_rgb = adapter_forward(x[b:], to_rgb) if to_rgb is not None else zeros
    p_tir = adapter_forward(x[:b], to_tir) if to_tir is not None else zeros
    return T.concat([p_rgb, p_tir], axis=0)


def dual_stream_layer(s: DualState, p: LayerParams, sl: PlanSlice, cfg: BackboneConfig) -> DualState:
    """One frozen layer on both streams with simultaneous cross-modal prompts.

    attention: x' = x + Att(LN(x)) + Ada(x_other)
    mlp:       out = x' + MLP(LN(x')) + Ada(x'_other)
    Single-direction plans add a prompt to their target stream only.
    """
    layer = s.layer + 1
    if sl.layer != layer:
        raise ValueError(f"plan slice is for layer {sl.layer}, but the state is entering layer {layer}")
    x, b = s.tokens, s.batch
    mid = x + attention_branch(x, p, cfg)
    prompt = _prompts(x, b, sl, "attention")
    if prompt is not None:
        mid = mid + prompt
    out = mid + mlp_branch(mid, p, cfg)
    prompt = _prompts(mid, b, sl, "mlp")
    if prompt is not None:
        out = out + prompt
    return DualState(out, s.num_template, layer)


def fused_search_tokens(state: DualState, variant: str = "BAT") -> Tensor:
    """Head input: sum of both streams; single-direction variants read their prompted stream."""
    search, b = state.search, state.batch
    if variant in SINGLE_DIRECTION:
        return search[b:] if SINGLE_DIRECTION[variant] == RGB_TO_TIR else search[:b]
    return search[:b] + search[b:]


def predict(state: DualState, head: HeadParams, search_size: int, variant: str = "BAT",
            window: CropWindow | None = None, frame_size=None) -> tuple[HeadMaps, list[np.ndarray]]:
    maps = head_forward(fused_search_tokens(state, variant), head)
    boxes = [decode_box(*maps.numpy(i), search_size, window, frame_size) for i in range(maps.score.shape[0])]
    return maps, boxes


def select_stream(score_rgb: np.ndarray, score_tir: np.ndarray) -> str:
    """Stream with the larger global score maximum; RGB wins ties."""
    return "tir" if np.max(score_tir) > np.max(score_rgb) else "rgb"


def baseline_dual_predict(state: DualState, head: HeadParams, search_size: int,
                          window: CropWindow | None = None, frame_size=None) -> tuple[np.ndarray, str]:
    """Run the head on each stream; decode the stream with the higher score peak (batch item 0)."""
    maps = head_forward(state.search, head)
    b = state.batch
    pick = select_stream(maps.score.data[0], maps.score.data[b])
    return decode_box(*maps.numpy(0 if pick == "rgb" else b), search_size, window, frame_size), pick


@dataclass
class TrainBatch:
    """Template/search crops per modality with ground truth in search-patch pixels."""

    template_rgb: np.ndarray  # (B, Zt, Zt, 3)
    template_tir: np.ndarray  # (B, Zt, Zt)
    search_rgb: np.ndarray    # (B, Zs, Zs, 3)
    search_tir: np.ndarray    # (B, Zs, Zs)
    gt_rgb: np.ndarray        # (B, 4)
    gt_tir: np.ndarray

    def __len__(self) -> int:
        return len(self.gt_rgb)


class BATModel:
    """Frozen shared backbone, an adapter plan and a centre head."""

    def __init__(self, cfg: RunConfig, seed: int | None = None):
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        # Independent streams so every variant with the same seed shares backbone and head init.
        self.backbone: BackboneParams = init_backbone(cfg.backbone_config(), np.random.default_rng([seed, 0]))
        self.backbone.freeze()
        self.plan: AdapterPlan = build_adapter_plan(cfg.variant, cfg.layer_set, cfg.stages, cfg.adapter_config(),
                                                    cfg.num_layers, np.random.default_rng([seed, 1]))
        self.head: HeadParams = init_head(cfg.d_t, cfg.head_channels, np.random.default_rng([seed, 2]),
                                          trainable=not cfg.freeze_head)

    @property
    def variant(self) -> str:
        return self.plan.variant

    @property
    def search_size(self) -> int:
        return self.cfg.image_size_search

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.backbone.named_tensors())
        out.update(self.plan.named_tensors())
        out.update(self.head.named_tensors())
        return out

    def trainable(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_tensors()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
        for name, t in own.items():
            a = arrays[name]
            if a.shape != t.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {a.shape}, expected {t.shape}")
            t.data = np.array(a, dtype=np.float64)

    def encode(self, template_rgb, template_tir, search_rgb, search_tir,
               keep_states: bool = False) -> DualState | tuple[DualState, list[DualState]]:
        bb = self.backbone
        c, zt, zs = bb.config.in_channels, bb.config.image_size_template, bb.config.image_size_search
        templates = np.concatenate([_batch_rgb(template_rgb, zt, c), _batch_rgb(template_tir, zt, c)])
        searches = np.concatenate([_batch_rgb(search_rgb, zs, c), _batch_rgb(search_tir, zs, c)])
        state = DualState(patchify_and_embed(templates, searches, bb).tokens, bb.config.num_template_tokens)
        states = [state]
        for i, layer in enumerate(bb.layers, start=1):
            state = dual_stream_layer(state, layer, plan_slice(self.plan, i), bb.config)
            states.append(state)
        return (state, states) if keep_states else state

    def loss(self, batch: TrainBatch, cfg: LossConfig):
        if len(batch) == 0:
            raise ValueError("empty training batch")
        state = self.encode(batch.template_rgb, batch.template_tir, batch.search_rgb, batch.search_tir)
        if self.variant == "Baseline-Dual":
            # the head sees each stream on its own; averaging over 2B samples weighs both equally
            gt = np.concatenate([batch.gt_rgb, batch.gt_tir])
            return compute_loss(head_forward(state.search, self.head), gt, self.search_size, cfg)
        gt = batch.gt_tir if SINGLE_DIRECTION.get(self.variant) == RGB_TO_TIR else batch.gt_rgb
        maps = head_forward(fused_search_tokens(state, self.variant), self.head)
        return compute_loss(maps, gt, self.search_size, cfg)

    def foundation_loss(self, batch: TrainBatch, cfg: LossConfig):
        """Single-stream loss on the visible pair alone; no adapters are involved."""
        if len(batch) == 0:
            raise ValueError("empty training batch")
        state = backbone_forward(batch.template_rgb, batch.search_rgb, self.backbone)
        return compute_loss(head_forward(state.search, self.head), batch.gt_rgb, self.search_size, cfg)

    @property
    def tunes(self) -> bool:
        """Whether the dual-stream stage trains this model."""
        return self.variant != "Baseline-Dual" or self.cfg.tune_baseline

    def locate_batch(self, template_rgb, template_tir, search_rgb, search_tir) -> tuple[np.ndarray, ...]:
        """Score (B, G, G), offset and size (B, 2, G, G) maps without keeping a graph.

        Baseline-Dual returns, per item, the maps of the stream with the higher score peak.
        """
        with T.no_grad():
            state = self.encode(template_rgb, template_tir, search_rgb, search_tir)
            if self.variant == "Baseline-Dual":
                maps = head_forward(state.search, self.head)
                b = state.batch
                score = maps.score.data
                rows = [i if select_stream(score[i], score[b + i]) == "rgb" else b + i for i in range(b)]
                return maps.score.data[rows], maps.offset.data[rows], maps.size.data[rows]
            maps = head_forward(fused_search_tokens(state, self.variant), self.head)
            return maps.score.data, maps.offset.data, maps.size.data

    def locate(self, template_rgb, template_tir, search_rgb, search_tir, **_) -> tuple[np.ndarray, ...]:
        """Maps for one template/search pair."""
        score, offset, size = self.locate_batch(template_rgb, template_tir, search_rgb, search_tir)
        return score[0], offset[0], size[0]


def _batch_rgb(images, size: int, channels: int) -> np.ndarray:
    """Batch of (B, S, S, C) images; single images and single-channel input are promoted."""
    img = np.asarray(images, dtype=np.float64)
    if img.ndim == 2 or (img.ndim == 3 and img.shape[:2] == (size, size) and img.shape[-1] in (1, channels)):
        img = img[None]
    if img.ndim == 3:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, channels, axis=-1)
    return img


def make_optimizer(model: BATModel, cfg: RunConfig) -> AdamW:
    return AdamW(model.trainable(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                 weight_decay=cfg.weight_decay)


def train_step(model: BATModel, batch: TrainBatch, opt: AdamW, loss_cfg: LossConfig) -> float:
    """One AdamW update of the trainable tensors; returns the pre-update loss."""
    if len(batch) == 0:
        raise ValueError("empty training batch")
    opt.zero_grad()
    total, _ = model.loss(batch, loss_cfg)
    T.backward(total)
    opt.step()
    return total.item()


def _as_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


class PairSampler:
    """Draws training pairs: a template at its ground truth, a search window jittered around it.

    Frames are converted to float once; template crops are cached per frame.
    """

    def __init__(self, records: list[SequenceRecord], cfg: RunConfig, seed: int, stream: int = 3):
        if not records:
            raise ValueError("no training sequences")
        self.records = records
        self.cfg = cfg
        self.rng = np.random.default_rng([seed, stream])
        self._frames: dict[tuple[int, str, int], np.ndarray] = {}
        self._templates: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _frame(self, r: int, modality: str, t: int) -> np.ndarray:
        key = (r, modality, t)
        if key not in self._frames:
            rec = self.records[r]
            self._frames[key] = mean_bordered(_as_float(rec.visible[t] if modality == "rgb" else rec.infrared[t]))
        return self._frames[key]

    def _template(self, r: int, t: int):
        key = (r, t)
        if key not in self._templates:
            rec, cfg = self.records[r], self.cfg
            zt = cfg.image_size_template
            self._templates[key] = (
                sample_bordered(self._frame(r, "rgb", t), crop_window(rec.gt_visible[t], cfg.template_factor, zt)),
                sample_bordered(self._frame(r, "tir", t), crop_window(rec.gt_infrared[t], cfg.template_factor, zt))[..., 0],
            )
        return self._templates[key]

    def next_batch(self) -> TrainBatch:
        cfg, rng = self.cfg, self.rng
        zs = cfg.image_size_search
        out = {k: [] for k in ("tr", "tt", "sr", "st", "gr", "gt")}
        for _ in range(cfg.batch_size):
            r = int(rng.integers(len(self.records)))
            rec = self.records[r]
            ti, si = int(rng.integers(len(rec))), int(rng.integers(len(rec)))
            jit = rng.uniform(-1.0, 1.0, size=2)
            sc = float(np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)))
            z_rgb, z_tir = self._template(r, ti)
            g = np.asarray(rec.gt_visible[si], dtype=np.float64)
            side = np.sqrt(g[2] * g[3])
            cx = g[0] + g[2] / 2 + jit[0] * cfg.center_jitter * side
            cy = g[1] + g[3] / 2 + jit[1] * cfg.center_jitter * side
            w, h = g[2] * sc, g[3] * sc
            win = crop_window((cx - w / 2, cy - h / 2, w, h), cfg.search_factor, zs)
            out["tr"].append(z_rgb)
            out["tt"].append(z_tir)
            out["sr"].append(sample_bordered(self._frame(r, "rgb", si), win))
            out["st"].append(sample_bordered(self._frame(r, "tir", si), win)[..., 0])
            out["gr"].append(win.to_patch(rec.gt_visible[si]))
            out["gt"].append(win.to_patch(rec.gt_infrared[si]))
        return TrainBatch(*(np.stack(out[k]) for k in ("tr", "tt", "sr", "st", "gr", "gt")))


def train_foundation(model: BATModel, records: list[SequenceRecord], cfg: RunConfig, steps: int | None = None,
                     seed: int | None = None, log_every: int = 0) -> list[float]:
    """Pretrain the head on visible-only pairs through the frozen backbone.

    This plays the part of the single-modality foundation tracker that every
    variant starts from; Baseline-Dual is this model applied to both streams.
    """
    steps = cfg.foundation_steps if steps is None else steps
    params = [t for t in model.head.tensors() if t.requires_grad]
    if not steps or not params:
        return []
    sampler = PairSampler(records, cfg, cfg.seed if seed is None else seed, stream=4)
    opt = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    loss_cfg = cfg.loss_config()
    trace = []
    for step in range(steps):
        opt.zero_grad()
        total, _ = model.foundation_loss(sampler.next_batch(), loss_cfg)
        T.backward(total)
        opt.step()
        trace.append(total.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("foundation step %d loss %.4f", step + 1, float(np.mean(trace[-log_every:])))
    return trace


def train(model: BATModel, records: list[SequenceRecord], cfg: RunConfig, steps: int | None = None,
          seed: int | None = None, log_every: int = 0) -> list[float]:
    """Foundation stage, then ``steps`` dual-stream steps; returns both loss traces joined."""
    return train_lockstep([model], records, cfg, steps, seed, log_every)[0]


def _same_init(models: list[BATModel]) -> bool:
    ref = models[0].backbone.named_tensors() | models[0].head.named_tensors()
    for m in models[1:]:
        own = m.backbone.named_tensors() | m.head.named_tensors()
        if own.keys() != ref.keys() or any(not np.array_equal(own[k].data, ref[k].data) for k in ref):
            return False
    return True


def train_lockstep(models: list[BATModel], records: list[SequenceRecord], cfg: RunConfig,
                   steps: int | None = None, seed: int | None = None, log_every: int = 0) -> list[list[float]]:
    """Train several models that share a backbone and head initialization.

    The foundation stage runs once and its head is copied into every model.
    The dual-stream stage then feeds one batch stream to every model that
    tunes, so each model ends exactly as :func:`train` would leave it alone.
    """
    if not _same_init(models):
        raise ValueError("lockstep models must share backbone and head initialization")
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    base = train_foundation(models[0], records, cfg, seed=seed, log_every=log_every)
    for m in models[1:]:
        for dst, src in zip(m.head.tensors(), models[0].head.tensors()):
            dst.data = src.data.copy()
    tuned = [i for i, m in enumerate(models) if m.tunes]
    losses: list[list[float]] = [list(base) for _ in models]
    if not tuned or not steps:
        return losses
    sampler = PairSampler(records, cfg, seed)
    opts = {i: make_optimizer(models[i], models[i].cfg) for i in tuned}
    for step in range(steps):
        batch = sampler.next_batch()
        for i in tuned:
            losses[i].append(train_step(models[i], batch, opts[i], models[i].cfg.loss_config()))
        if log_every and (step + 1) % log_every == 0:
            for i in tuned:
                log.info("%s step %d loss %.4f", models[i].variant, step + 1, float(np.mean(losses[i][-log_every:])))
    return losses


PredictFn = Callable[..., tuple[np.ndarray, np.ndarray, np.ndarray]]


def track_sequence(model: BATModel | PredictFn, record: SequenceRecord, cfg: RunConfig | None = None) -> np.ndarray:
    """Boxes (n, 4) for every frame; frame 0 reports the initial ground truth.

    ``model`` may be a :class:`BATModel` or any callable with the signature of
    :meth:`BATModel.locate`; it also receives ``frame=`` and ``window=``.
    """
    if isinstance(model, BATModel):
        return track_sequences(model, [record], cfg)[0]
    cfg = cfg or RunConfig()
    n = _check_frames(record)
    height, width = record.visible[0].shape[:2]
    z_rgb, z_tir = _first_templates(record, cfg)
    boxes = [np.asarray(record.gt_visible[0], dtype=np.float64)]
    prev = boxes[0]
    for t in range(1, n):
        win = crop_window(prev, cfg.search_factor, cfg.image_size_search)
        s_rgb = sample_window(_as_float(record.visible[t]), win)
        s_tir = sample_window(_as_float(record.infrared[t]), win)
        score, offset, size = model(z_rgb, z_tir, s_rgb, s_tir, frame=t, window=win)
        box = decode_box(score, offset, size, cfg.image_size_search, win, (width, height))
        boxes.append(box)
        prev = _usable(box, prev)
    return np.array(boxes)


TRACK_GROUP = 8


def track_sequences(model: BATModel, records: list[SequenceRecord], cfg: RunConfig | None = None,
                    group: int = TRACK_GROUP) -> list[np.ndarray]:
    """Track each record; sequences advance frame by frame in fixed groups of ``group``.

    Group membership depends only on record order, so splitting the record list on
    group boundaries (as ``--jobs`` does) yields the same boxes.
    """
    cfg = cfg or model.cfg
    out = []
    for start in range(0, len(records), group):
        out.extend(_track_group(model, records[start:start + group], cfg))
    return out


def _track_group(model: BATModel, records: list[SequenceRecord], cfg: RunConfig) -> list[np.ndarray]:
    lengths = [_check_frames(r) for r in records]
    templates = [_first_templates(r, cfg) for r in records]
    boxes = [[np.asarray(r.gt_visible[0], dtype=np.float64)] for r in records]
    prev = [b[0] for b in boxes]
    for t in range(1, max(lengths)):
        active = [i for i, n in enumerate(lengths) if t < n]
        wins = {i: crop_window(prev[i], cfg.search_factor, cfg.image_size_search) for i in active}
        score, offset, size = model.locate_batch(
            np.stack([templates[i][0] for i in active]), np.stack([templates[i][1] for i in active]),
            np.stack([sample_window(_as_float(records[i].visible[t]), wins[i]) for i in active]),
            np.stack([sample_window(_as_float(records[i].infrared[t]), wins[i]) for i in active]))
        for k, i in enumerate(active):
            height, width = records[i].visible[t].shape[:2]
            box = decode_box(score[k], offset[k], size[k], cfg.image_size_search, wins[i], (width, height))
            boxes[i].append(box)
            prev[i] = _usable(box, prev[i])
    return [np.array(b) for b in boxes]


def _check_frames(record: SequenceRecord) -> int:
    if len(record) == 0:
        raise ValueError(f"sequence {record.name} has no frames")
    return len(record)


def _first_templates(record: SequenceRecord, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    zt = cfg.image_size_template
    return (sample_window(_as_float(record.visible[0]), crop_window(record.gt_visible[0], cfg.template_factor, zt)),
            sample_window(_as_float(record.infrared[0]), crop_window(record.gt_infrared[0], cfg.template_factor, zt)))


def _usable(box: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """Next search anchor: a collapsed side falls back to the previous extent."""
    x, y, w, h = box
    cx, cy = x + w / 2, y + h / 2
    w = w if w >= 1.0 else prev[2]
    h = h if h >= 1.0 else prev[3]
    return np.array([cx - w / 2, cy - h / 2, w, h])
