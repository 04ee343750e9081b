"""Multi-scale convolution adapter: bottleneck down-projection, ReLU, three
parallel conv paths (1x1 / 3x3 / 5x5) over the token grid with an inner skip,
then an up-projection back to the embedding width.

The up-projection starts at zero, so a freshly inserted adapter is inert and
the adapted network reproduces the frozen one exactly at step 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, GridMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class AdapterConfig:
    embed_dim: int
    bottleneck_ratio: float = 0.5
    reduce_channels: int = 24
    path_out_1x1: int = 192
    path_out_3x3: int = 96
    path_out_5x5: int = 96

    @property
    def hidden(self) -> int:
        return round(self.embed_dim * self.bottleneck_ratio)

    def __post_init__(self):
        paths = self.path_out_1x1 + self.path_out_3x3 + self.path_out_5x5
        if paths != self.hidden:
            raise ConfigError(
                f"adapter path widths {self.path_out_1x1}+{self.path_out_3x3}+"
                f"{self.path_out_5x5} must equal bottleneck width {self.hidden}"
            )
        if min(self.reduce_channels, self.path_out_1x1, self.path_out_3x3,
               self.path_out_5x5) < 1:
            raise ConfigError("adapter channel widths must be positive")

    @classmethod
    def for_embed_dim(cls, embed_dim: int, bottleneck_ratio: float = 0.5) -> "AdapterConfig":
        """Scale the reference channel split (1/2, 1/4, 1/4, hidden/16) to any width."""
        hidden = round(embed_dim * bottleneck_ratio)
        quarter = hidden // 4
        return cls(
            embed_dim=embed_dim,
            bottleneck_ratio=bottleneck_ratio,
            reduce_channels=max(1, hidden // 16),
            path_out_1x1=hidden - 2 * quarter,
            path_out_3x3=quarter,
            path_out_5x5=quarter,
        )


@dataclass
class AdapterParams:
    down_w: Tensor
    down_b: Tensor
    p1_k: Tensor
    p1_b: Tensor
    p3a_k: Tensor
    p3a_b: Tensor
    p3b_k: Tensor
    p3b_b: Tensor
    p5a_k: Tensor
    p5a_b: Tensor
    p5b_k: Tensor
    p5b_b: Tensor
    up_w: Tensor
    up_b: Tensor

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("down_w", "down_b", "p1_k", "p1_b", "p3a_k", "p3a_b",
                     "p3b_k", "p3b_b", "p5a_k", "p5a_b", "p5b_k", "p5b_b",
                     "up_w", "up_b"):
            yield name, getattr(self, name)


def init_adapter(cfg: AdapterConfig, rng: np.random.Generator,
                 dtype=np.float32) -> AdapterParams:
    """All adapter parameters are trainable; up-projection starts at zero."""
    d, h, c = cfg.embed_dim, cfg.hidden, cfg.reduce_channels

    def gauss(*shape):
        return Tensor(rng.normal(0.0, 0.02, shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return AdapterParams(
        down_w=gauss(d, h), down_b=zeros(h),
        p1_k=gauss(cfg.path_out_1x1, h, 1, 1), p1_b=zeros(cfg.path_out_1x1),
        p3a_k=gauss(c, h, 1, 1), p3a_b=zeros(c),
        p3b_k=gauss(cfg.path_out_3x3, c, 3, 3), p3b_b=zeros(cfg.path_out_3x3),
        p5a_k=gauss(c, h, 1, 1), p5a_b=zeros(c),
        p5b_k=gauss(cfg.path_out_5x5, c, 5, 5), p5b_b=zeros(cfg.path_out_5x5),
        up_w=zeros(h, d), up_b=zeros(d),
    )


def adapter_forward(tokens: Tensor, grid: int, params: AdapterParams) -> Tensor:
    """Run the adapter over a token sequence of N = grid^2 patches plus one
    leading class token.

    Patch tokens are reshaped to the grid, passed through the three conv
    paths, concatenated back to the bottleneck width and merged with the
    pre-conv activations (inner skip). The class token has no spatial
    context, so it takes the skip path only: down, ReLU, up.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    b, t, d = tokens.shape
    n = grid * grid
    if t != n + 1:
        raise GridMismatch(f"{t} tokens cannot host a {grid}x{grid} patch grid plus class token")

    h = T.relu(T.add(T.matmul(tokens, params.down_w), params.down_b))
    cls = T.narrow(h, 1, 0, 1)
    patches = T.narrow(h, 1, 1, n)

    hidden = params.down_w.shape[1]
    spatial = T.transpose(T.reshape(patches, (b, grid, grid, hidden)), (0, 3, 1, 2))
    c1 = T.conv2d(spatial, params.p1_k, params.p1_b)
    c3 = T.conv2d(T.conv2d(spatial, params.p3a_k, params.p3a_b), params.p3b_k, params.p3b_b)
    c5 = T.conv2d(T.conv2d(spatial, params.p5a_k, params.p5a_b), params.p5b_k, params.p5b_b)
    merged = T.add(T.concat([c1, c3, c5], axis=1), spatial)
    back = T.reshape(T.transpose(merged, (0, 2, 3, 1)), (b, n, hidden))

    out = T.add(T.matmul(T.concat([cls, back], axis=1), params.up_w), params.up_b)
    if squeeze:
        out = T.reshape(out, (t, d))
    return out


def adapter_param_count(cfg: AdapterConfig) -> int:
    """Exact per-adapter parameter count, biases included."""
    d, h, c = cfg.embed_dim, cfg.hidden, cfg.reduce_channels
    o1, o3, o5 = cfg.path_out_1x1, cfg.path_out_3x3, cfg.path_out_5x5
    down = d * h + h
    p1 = h * o1 * 1 * 1 + o1
    p3 = (h * c + c) + (c * o3 * 9 + o3)
    p5 = (h * c + c) + (c * o5 * 25 + o5)
    up = h * d + d
    return down + p1 + p3 + p5 + up
