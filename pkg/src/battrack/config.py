"""Flat run configuration with the two shipped presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .adapter import STAGES, VARIANTS, AdapterConfig
from .backbone import BackboneConfig
from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # backbone
    image_size_template: int = 32
    image_size_search: int = 64
    patch_size: int = 16
    d_t: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    # adapters; layers=None means every layer
    variant: str = "BAT"
    d_e: int = 4
    include_bias: bool = True
    layers: tuple[int, ...] | None = None
    stages: tuple[str, ...] = STAGES
    # head
    head_channels: int = 32
    freeze_head: bool = False
    # loss
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    focal_alpha: float = 2.0
    focal_gamma: float = 4.0
    sigma_factor: float = 1.0 / 12.0
    # optimizer
    lr: float = 4e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    # RGB-only head pretraining that stands in for the pretrained foundation tracker
    foundation_steps: int = 1000
    # Baseline-Dual is the untuned foundation model unless this is set
    tune_baseline: bool = False
    seed: int = 0
    # crops and training-pair jitter
    template_factor: float = 2.0
    search_factor: float = 4.0
    center_jitter: float = 0.5
    scale_jitter: float = 0.15
    # paths (CLI flags take precedence)
    data_root: str = ""
    out_ckpt: str = ""
    out_results: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0 or self.foundation_steps < 0:
            raise ConfigError("steps and foundation_steps must be >= 0")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        object.__setattr__(self, "stages", tuple(self.stages))
        try:
            self.backbone_config()
            self.adapter_config()
            self.loss_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def layer_set(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_layers + 1)) if self.layers is None else self.layers

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.image_size_template, self.image_size_search, self.patch_size,
                              self.d_t, self.num_layers, self.num_heads, self.mlp_ratio)

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(self.d_t, self.d_e, self.include_bias)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_iou, self.lambda_l1, self.focal_alpha, self.focal_gamma, self.sigma_factor)

    def plan_descriptor(self) -> dict:
        return {"variant": self.variant, "num_layers": self.num_layers,
                "layers": list(self.layer_set), "stages": list(self.stages)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = None if self.layers is None else list(self.layers)
        d["stages"] = list(self.stages)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


PRESETS: dict[str, RunConfig] = {
    "toy": RunConfig(),
    "full-shape": RunConfig(image_size_template=128, image_size_search=256, d_t=768, num_layers=12,
                            num_heads=12, d_e=8, head_channels=256, batch_size=32),
}

_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    base = d.pop("preset", "toy")
    if base not in PRESETS:
        raise ConfigError(f"unknown preset {base!r}; expected one of {sorted(PRESETS)}")
    unknown = sorted(set(d) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return replace(PRESETS[base], **d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(source: str | Path) -> RunConfig:
    """A preset name or a path to a flat JSON file (optionally naming a base ``preset``)."""
    if str(source) in PRESETS:
        return PRESETS[str(source)]
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return config_from_dict(raw)
