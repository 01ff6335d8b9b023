"""Frozen ViT-style joint encoder over concatenated template and search tokens."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    image_size_template: int = 32
    image_size_search: int = 64
    patch_size: int = 16
    d_t: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    in_channels: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        for size in (self.image_size_template, self.image_size_search):
            if size <= 0 or size % self.patch_size:
                raise ValueError(f"image size {size} is not a positive multiple of patch_size {self.patch_size}")
        if self.d_t % self.num_heads:
            raise ValueError(f"d_t={self.d_t} is not divisible by num_heads={self.num_heads}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")

    @property
    def grid_template(self) -> int:
        return self.image_size_template // self.patch_size

    @property
    def grid_search(self) -> int:
        return self.image_size_search // self.patch_size

    @property
    def num_template_tokens(self) -> int:
        return self.grid_template ** 2

    @property
    def num_search_tokens(self) -> int:
        return self.grid_search ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_template_tokens + self.num_search_tokens

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2


@dataclass
class TokenState:
    """Residual-stream tokens, shape (batch, t_n, d_t); template tokens come first."""

    tokens: Tensor
    num_template: int

    @property
    def search(self) -> Tensor:
        return self.tokens[:, self.num_template:, :]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]


@dataclass
class EmbedParams:
    patch_w: Tensor
    patch_b: Tensor
    pos_template: Tensor
    pos_search: Tensor


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class BackboneParams:
    config: BackboneConfig
    embed: EmbedParams
    layers: list[LayerParams] = field(default_factory=list)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"backbone.embed.{f.name}": getattr(self.embed, f.name) for f in fields(EmbedParams)}
        for i, layer in enumerate(self.layers, start=1):
            for f in fields(LayerParams):
                out[f"backbone.layer.{i}.{f.name}"] = getattr(layer, f.name)
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def freeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, std: float = 0.02) -> BackboneParams:
    """Seeded Gaussian stand-in for pretrained weights; LN gains one, biases zero."""
    d, h = cfg.d_t, cfg.d_t * cfg.mlp_ratio

    def gauss(*shape):
        return Tensor(rng.normal(0.0, std, size=shape))

    embed = EmbedParams(gauss(cfg.patch_dim, d), Tensor(np.zeros(d)),
                        gauss(cfg.num_template_tokens, d), gauss(cfg.num_search_tokens, d))
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(LayerParams(
            ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
            wq=gauss(d, d), bq=Tensor(np.zeros(d)),
            wk=gauss(d, d), bk=Tensor(np.zeros(d)),
            wv=gauss(d, d), bv=Tensor(np.zeros(d)),
            wo=gauss(d, d), bo=Tensor(np.zeros(d)),
            ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)),
            w1=gauss(d, h), b1=Tensor(np.zeros(h)),
            w2=gauss(h, d), b2=Tensor(np.zeros(d)),
        ))
    return BackboneParams(cfg, embed, layers)


def _as_batch(images: np.ndarray, size: int, channels: int, what: str) -> np.ndarray:
    img = np.asarray(images, dtype=np.float64)
    if img.ndim == 2 or (img.ndim == 3 and img.shape[-1] in (1, channels) and img.shape[0] == size
                         and img.shape[1] == size):
        img = img[None]
    if img.ndim == 3:
        img = img[..., None]
    if img.ndim != 4 or img.shape[1] != size or img.shape[2] != size:
        raise ValueError(f"{what} image has shape {np.shape(images)}, expected ({size}, {size}[, C])")
    if img.shape[-1] == 1 and channels != 1:
        img = np.repeat(img, channels, axis=-1)
    if img.shape[-1] != channels:
        raise ValueError(f"{what} image has {img.shape[-1]} channels, expected {channels}")
    return img


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), patches in row-major order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def patchify_and_embed(template: np.ndarray, search: np.ndarray, params: BackboneParams) -> TokenState:
    """Embed both images, add their position tables, concatenate template-first.

    Accepts a single image (H, W[, C]) or a batch (B, H, W[, C]); single-channel
    input is replicated across the colour channels.
    """
    cfg = params.config
    z = _as_batch(template, cfg.image_size_template, cfg.in_channels, "template")
    s = _as_batch(search, cfg.image_size_search, cfg.in_channels, "search")
    if z.shape[0] != s.shape[0]:
        raise ValueError(f"template batch {z.shape[0]} != search batch {s.shape[0]}")
    e = params.embed
    zt = Tensor(patchify(z, cfg.patch_size)) @ e.patch_w + e.patch_b + e.pos_template
    st = Tensor(patchify(s, cfg.patch_size)) @ e.patch_w + e.patch_b + e.pos_search
    return TokenState(T.concat([zt, st], axis=1), cfg.num_template_tokens)


def attention(x: Tensor, p: LayerParams, num_heads: int) -> Tensor:
    """Multi-head self attention over (B, T, d) without the residual."""
    b, t, d = x.shape
    dh = d // num_heads

    def heads(w, bias):
        return (x @ w + bias).reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(p.wq, p.bq), heads(p.wk, p.bk), heads(p.wv, p.bv)
    att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx @ p.wo + p.bo


def attention_branch(x: Tensor, p: LayerParams, cfg: BackboneConfig) -> Tensor:
    return attention(T.layernorm(x, p.ln1_g, p.ln1_b, cfg.ln_eps), p, cfg.num_heads)


def mlp_branch(x: Tensor, p: LayerParams, cfg: BackboneConfig) -> Tensor:
    h = T.gelu(T.layernorm(x, p.ln2_g, p.ln2_b, cfg.ln_eps) @ p.w1 + p.b1)
    return h @ p.w2 + p.b2


def encoder_layer(x: TokenState, p: LayerParams, cfg: BackboneConfig) -> TokenState:
    """Pre-norm layer: x' = x + Att(LN(x)); out = x' + MLP(LN(x'))."""
    if x.tokens.ndim != 3 or x.tokens.shape[-1] != cfg.d_t:
        raise T.ShapeError("encoder_layer", x.tokens.shape, (cfg.d_t,))
    mid = x.tokens + attention_branch(x.tokens, p, cfg)
    out = mid + mlp_branch(mid, p, cfg)
    return TokenState(out, x.num_template)


def backbone_forward(template: np.ndarray, search: np.ndarray, params: BackboneParams) -> TokenState:
    state = patchify_and_embed(template, search, params)
    for layer in params.layers:
        state = encoder_layer(state, layer, params.config)
    return state
