"""Hourglass cross-modal adapters, insertion plans and parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

VARIANTS = ("BAT", "BAT-RGB", "BAT-TIR", "BAT-Dual", "Baseline-Dual")
STAGES = ("attention", "mlp")
# Prompt directions, named source->target.
RGB_TO_TIR = "rgb2tir"
TIR_TO_RGB = "tir2rgb"
DIRECTIONS = (TIR_TO_RGB, RGB_TO_TIR)

# Single-direction variants: BAT-RGB prompts the TIR stream from RGB, BAT-TIR the reverse.
SINGLE_DIRECTION = {"BAT-RGB": RGB_TO_TIR, "BAT-TIR": TIR_TO_RGB}


@dataclass(frozen=True)
class AdapterConfig:
    d_t: int
    d_e: int
    include_bias: bool = True

    def __post_init__(self):
        if not 0 < self.d_e < self.d_t:
            raise ValueError(f"need 0 < d_e < d_t, got d_e={self.d_e}, d_t={self.d_t}")

    def params_per_instance(self) -> int:
        d_t, d_e = self.d_t, self.d_e
        bias = (d_e + d_e + d_t) if self.include_bias else 0
        return d_t * d_e + d_e * d_e + d_e * d_t + bias


@dataclass
class AdapterParams:
    down_w: Tensor
    down_b: Tensor | None
    mid_w: Tensor
    mid_b: Tensor | None
    up_w: Tensor
    up_b: Tensor | None

    def named(self) -> dict[str, Tensor]:
        out = {}
        for part in ("down", "mid", "up"):
            out[f"{part}.w"] = getattr(self, f"{part}_w")
            b = getattr(self, f"{part}_b")
            if b is not None:
                out[f"{part}.b"] = b
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())


def init_adapter(cfg: AdapterConfig, rng: np.random.Generator, std: float = 0.02) -> AdapterParams:
    """Gaussian down/mid projections; the up projection starts at exactly zero."""
    d_t, d_e = cfg.d_t, cfg.d_e

    def bias(n):
        return Tensor(np.zeros(n), requires_grad=True) if cfg.include_bias else None

    return AdapterParams(
        down_w=Tensor(rng.normal(0.0, std, (d_t, d_e)), requires_grad=True), down_b=bias(d_e),
        mid_w=Tensor(rng.normal(0.0, std, (d_e, d_e)), requires_grad=True), mid_b=bias(d_e),
        up_w=Tensor(np.zeros((d_e, d_t)), requires_grad=True), up_b=bias(d_t),
    )


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def adapter_forward(x: Tensor, a: AdapterParams) -> Tensor:
    """Prompt = up(mid(down(x))); purely linear, same shape as ``x``."""
    if x.shape[-1] != a.down_w.shape[0]:
        raise ShapeError("adapter_forward", x.shape, a.down_w.shape)
    return _linear(_linear(_linear(x, a.down_w, a.down_b), a.mid_w, a.mid_b), a.up_w, a.up_b)


@dataclass
class AdapterPlan:
    """Where adapters sit and which instance serves each prompt.

    ``instances`` is keyed by ``(layer, stage, direction)``; ``direction`` is
    ``None`` when one instance serves every active direction at that point.
    """

    variant: str
    num_layers: int
    layer_set: tuple[int, ...]
    stages: tuple[str, ...]
    instances: dict[tuple[int, str, str | None], AdapterParams] = field(default_factory=dict)

    @property
    def directions(self) -> tuple[str, ...]:
        if self.variant in ("BAT", "BAT-Dual"):
            return DIRECTIONS
        if self.variant in SINGLE_DIRECTION:
            return (SINGLE_DIRECTION[self.variant],)
        return ()

    @property
    def shared(self) -> bool:
        return self.variant != "BAT-Dual"

    def adapter_for(self, layer: int, stage: str, direction: str) -> AdapterParams | None:
        """Adapter producing the ``direction`` prompt at (layer, stage), if any."""
        if direction not in self.directions:
            return None
        key = (layer, stage, None if self.shared else direction)
        return self.instances.get(key)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (layer, stage, direction), a in sorted(self.instances.items(), key=_key_order):
            prefix = f"adapter.{layer}.{stage}" + (f".{direction}" if direction else "")
            for name, t in a.named().items():
                out[f"{prefix}.{name}"] = t
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def descriptor(self) -> dict:
        return {"variant": self.variant, "num_layers": self.num_layers,
                "layers": list(self.layer_set), "stages": list(self.stages)}


def _key_order(item):
    (layer, stage, direction), _ = item
    return layer, STAGES.index(stage), direction or ""


def _instance_keys(variant: str, layer_set, stages) -> list[tuple[int, str, str | None]]:
    if variant == "Baseline-Dual":
        return []
    keys = []
    for layer in layer_set:
        for stage in stages:
            if variant == "BAT-Dual":
                keys.extend((layer, stage, d) for d in DIRECTIONS)
            else:
                keys.append((layer, stage, None))
    return keys


def _validate(variant: str, layer_set, stages, num_layers: int) -> tuple[tuple[int, ...], tuple[str, ...]]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    layers = tuple(sorted(set(int(i) for i in layer_set)))
    bad = [i for i in layers if not 1 <= i <= num_layers]
    if bad:
        raise ValueError(f"adapter layer(s) {bad} outside 1..{num_layers}")
    stages = tuple(stages)
    if not stages or any(s not in STAGES for s in stages):
        raise ValueError(f"stages {stages} must be a non-empty subset of {STAGES}")
    stages = tuple(s for s in STAGES if s in stages)
    if variant == "Baseline-Dual":
        layers = ()
    return layers, stages


def build_adapter_plan(variant: str, layer_set, stages, config: AdapterConfig, num_layers: int,
                       rng: np.random.Generator | None = None) -> AdapterPlan:
    """Instantiate fresh adapters for every insertion point of ``variant``."""
    layers, stages = _validate(variant, layer_set, stages, num_layers)
    rng = rng if rng is not None else np.random.default_rng(0)
    plan = AdapterPlan(variant, num_layers, layers, stages)
    for key in _instance_keys(variant, layers, stages):
        plan.instances[key] = init_adapter(config, rng)
    return plan


def count_instances(variant: str, layer_set, stages, num_layers: int) -> int:
    layers, stages = _validate(variant, layer_set, stages, num_layers)
    return len(_instance_keys(variant, layers, stages))


def count_trainable_params(plan: AdapterPlan | dict, config: AdapterConfig) -> int:
    """Closed-form adapter parameter count; accepts a plan or its descriptor."""
    if isinstance(plan, AdapterPlan):
        plan = plan.descriptor()
    n = count_instances(plan["variant"], plan["layers"], plan["stages"], plan["num_layers"])
    return n * config.params_per_instance()
