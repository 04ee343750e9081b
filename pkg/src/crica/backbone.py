"""ViT-style backbone producing per-image class token and patch-token map.

The base weights are frozen (random Gaussian at desk scale; pretrained
foundation weights are out of scope); the only trainable parameters inside
the backbone are the per-block adapters. Blocks are pre-LN:

    z' = MHA(LN(z_prev)) + z_prev
    z  = MLP(LN(z')) + s * Adapter(LN(z')) + z'

with the adapter consuming the same normalized activations as the MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, AdapterParams, adapter_forward, init_adapter
from .errors import BadImageSize, ConfigError, GridTooSmall, HeadMismatch
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    adapter_scale: float = 0.2
    final_norm: bool = False  # extra LN after the last block, off by default

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise HeadMismatch(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.grid < 3:
            raise GridTooSmall(f"grid {self.grid} < 3; the pyramid needs a 3x3 split")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class BlockParams:
    """One transformer block; everything frozen except the adapter."""
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
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    adapter: AdapterParams

    _FROZEN = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for name in self._FROZEN:
            yield name, getattr(self, name)
        for name, p in self.adapter.named_params():
            yield f"adapter.{name}", p


@dataclass
class BackboneParams:
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list[BlockParams]
    final_g: Optional[Tensor] = None
    final_b: Optional[Tensor] = None

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, block in enumerate(self.blocks):
            for name, p in block.named_params():
                yield f"block{i}.{name}", p
        if self.final_g is not None:
            yield "final_g", self.final_g
            yield "final_b", self.final_b


def init_backbone(cfg: BackboneConfig, adapter_cfg: AdapterConfig,
                  rng: np.random.Generator, dtype=np.float32) -> BackboneParams:
    """Frozen Gaussian (std 0.02) base weights plus trainable zero-start adapters."""
    d = cfg.embed_dim

    def gauss(*shape):
        return Tensor(rng.normal(0.0, 0.02, shape).astype(dtype), requires_grad=False)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=False)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=False)

    patch_dim = 3 * cfg.patch_size * cfg.patch_size
    blocks = []
    for _ in range(cfg.depth):
        blocks.append(BlockParams(
            ln1_g=ones(d), ln1_b=zeros(d),
            wq=gauss(d, d), bq=zeros(d),
            wk=gauss(d, d), bk=zeros(d),
            wv=gauss(d, d), bv=zeros(d),
            wo=gauss(d, d), bo=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
            mlp_w1=gauss(d, cfg.mlp_hidden), mlp_b1=zeros(cfg.mlp_hidden),
            mlp_w2=gauss(cfg.mlp_hidden, d), mlp_b2=zeros(d),
            adapter=init_adapter(adapter_cfg, rng, dtype=dtype),
        ))
    return BackboneParams(
        patch_w=gauss(patch_dim, d),
        patch_b=zeros(d),
        cls_token=gauss(d),
        pos_embed=gauss(cfg.num_patches + 1, d),
        blocks=blocks,
        final_g=ones(d) if cfg.final_norm else None,
        final_b=zeros(d) if cfg.final_norm else None,
    )


def patch_embed(images: Tensor, cfg: BackboneConfig, params: BackboneParams) -> Tensor:
    """Project non-overlapping patches, prepend the class token, add
    positional embeddings. Returns (B, N+1, D); accepts a single (3, H, W)
    image as a batch of one."""
    squeeze = images.ndim == 3
    if squeeze:
        images = T.reshape(images, (1,) + images.shape)
    b, c, hh, ww = images.shape
    if c != 3 or hh != cfg.image_size or ww != cfg.image_size:
        raise BadImageSize(
            f"expected (3, {cfg.image_size}, {cfg.image_size}) images, got {images.shape[1:]}"
        )
    g, ps = cfg.grid, cfg.patch_size
    # (B,3,H,W) -> (B, g, g, 3, ps, ps) -> (B, N, 3*ps*ps), patches row-major
    x = T.reshape(images, (b, 3, g, ps, g, ps))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, g * g, 3 * ps * ps))
    tokens = T.add(T.matmul(x, params.patch_w), params.patch_b)
    cls = T.add(
        Tensor(np.zeros((b, 1, 1), dtype=images.dtype)),
        T.reshape(params.cls_token, (1, 1, cfg.embed_dim)),
    )
    tokens = T.concat([cls, tokens], axis=1)
    tokens = T.add(tokens, params.pos_embed)
    if squeeze:
        tokens = T.reshape(tokens, tokens.shape[1:])
    return tokens


def mha(z: Tensor, params: BlockParams, heads: int) -> Tensor:
    """Scaled dot-product multi-head attention over the token axis."""
    squeeze = z.ndim == 2
    if squeeze:
        z = T.reshape(z, (1,) + z.shape)
    b, t, d = z.shape
    if d % heads != 0:
        raise HeadMismatch(f"dim {d} not divisible by {heads} heads")
    hd = d // heads

    def split(x):
        return T.transpose(T.reshape(x, (b, t, heads, hd)), (0, 2, 1, 3))

    q = split(T.add(T.matmul(z, params.wq), params.bq))
    k = split(T.add(T.matmul(z, params.wk), params.bk))
    v = split(T.add(T.matmul(z, params.wv), params.bv))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = T.add(T.matmul(ctx, params.wo), params.bo)
    if squeeze:
        out = T.reshape(out, (t, d))
    return out


def _mlp(x: Tensor, params: BlockParams) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, params.mlp_w1), params.mlp_b1))
    return T.add(T.matmul(h, params.mlp_w2), params.mlp_b2)


def transformer_block(z_prev: Tensor, params: BlockParams, heads: int) -> Tensor:
    """Pre-LN residual block without the adapter branch."""
    z_mid = T.add(mha(layer_norm1(z_prev, params), params, heads), z_prev)
    return T.add(_mlp(layer_norm2(z_mid, params), params), z_mid)


def adapted_block(z_prev: Tensor, params: BlockParams, heads: int, grid: int,
                  scale: float) -> Tensor:
    """Pre-LN block with the adapter in parallel to the MLP; both consume the
    same normalized activations. ``scale == 0`` reproduces the plain block."""
    z_mid = T.add(mha(layer_norm1(z_prev, params), params, heads), z_prev)
    normed = layer_norm2(z_mid, params)
    out = T.add(_mlp(normed, params), z_mid)
    if scale != 0.0:
        out = T.add(out, T.mul(adapter_forward(normed, grid, params.adapter), scale))
    return out


def layer_norm1(z: Tensor, params: BlockParams) -> Tensor:
    return T.layer_norm(z, params.ln1_g, params.ln1_b, eps=LN_EPS)


def layer_norm2(z: Tensor, params: BlockParams) -> Tensor:
    return T.layer_norm(z, params.ln2_g, params.ln2_b, eps=LN_EPS)


def backbone_forward(images: Tensor, cfg: BackboneConfig,
                     params: BackboneParams) -> tuple[Tensor, Tensor]:
    """Run all adapted blocks.

    Returns (class_tokens (B, D), patch_maps (B, g, g, D)); the patch map
    restores the row-major spatial layout of the patch tokens. Each image's
    outputs depend on that image alone.
    """
    if images.ndim == 3:
        images = T.reshape(images, (1,) + images.shape)
    tokens = patch_embed(images, cfg, params)
    b = tokens.shape[0]
    for block in params.blocks:
        tokens = adapted_block(tokens, block, cfg.heads, cfg.grid, cfg.adapter_scale)
    if params.final_g is not None:
        tokens = T.layer_norm(tokens, params.final_g, params.final_b, eps=LN_EPS)
    cls = T.reshape(T.narrow(tokens, 1, 0, 1), (b, cfg.embed_dim))
    patches = T.narrow(tokens, 1, 1, cfg.num_patches)
    maps = T.reshape(patches, (b, cfg.grid, cfg.grid, cfg.embed_dim))
    return cls, maps


def backbone_frozen_param_count(cfg: BackboneConfig) -> int:
    """Closed-form count of the frozen (non-adapter) backbone parameters."""
    d = cfg.embed_dim
    patch = (3 * cfg.patch_size ** 2) * d + d
    cls_pos = d + (cfg.num_patches + 1) * d
    attn = 4 * (d * d + d)
    mlp = d * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden * d + d
    lns = 4 * d
    per_block = attn + mlp + lns
    final = 2 * d if cfg.final_norm else 0
    return patch + cls_pos + cfg.depth * per_block + final
