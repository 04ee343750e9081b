"""Spatial-pyramid GeM aggregation of the patch map.

The grid is split at three levels (1x1, 2x2, 3x3) into 14 regions; each
region is pooled with generalized-mean pooling under one shared trainable
exponent. The level-1 GeM feature is replaced by the class token, so region
0 is the class token verbatim and regions 1..13 are pooled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyRegion, GridTooSmall, ShapeMismatch
from .tensor import Tensor

NUM_REGIONS = 14
EPS_GEM = 1e-6  # pre-pool clamp; adapted features can be negative
GEM_P_MIN, GEM_P_MAX = 0.5, 20.0  # clamp window applied after optimizer steps


@dataclass(frozen=True)
class Rect:
    """Half-open row/column window into the patch grid."""
    row0: int
    row1: int
    col0: int
    col1: int


def pyramid_regions(grid: int) -> list[Rect]:
    """The 14 pyramid rectangles: 1 full-grid, 4 half-splits, 9 third-splits,
    each level row-major. Boundaries are floor(k * grid / n), which tiles the
    grid exhaustively with no overlap per level."""
    if grid < 3:
        raise GridTooSmall(f"grid {grid} < 3")
    rects = []
    for n in (1, 2, 3):
        bounds = [(k * grid) // n for k in range(n + 1)]
        for r in range(n):
            for c in range(n):
                rects.append(Rect(bounds[r], bounds[r + 1], bounds[c], bounds[c + 1]))
    return rects


def gem(region: Tensor, p) -> Tensor:
    """Per-channel generalized mean ((1/m) sum x^p)^(1/p) over the leading
    cell axis of an (m, D) region. p = 1 is the mean; p -> inf approaches the
    max. Inputs are clamped at EPS_GEM so fractional powers stay defined."""
    if region.ndim != 2 or region.shape[0] < 1:
        raise EmptyRegion(f"gem needs a non-empty (m, D) region, got {region.shape}")
    return _gem_pooled(region, p, axis=0)


def _gem_pooled(region: Tensor, p, axis: int) -> Tensor:
    clamped = T.clamp_min(region, EPS_GEM)
    powered = T.power(clamped, p)
    pooled = T.tmean(powered, axis=axis)
    inv_p = T.power(p, -1) if isinstance(p, Tensor) else 1.0 / p
    return T.power(pooled, inv_p)


def spm_aggregate(class_token: Tensor, patch_map: Tensor, p) -> Tensor:
    """Aggregate one image: class token plus 13 GeM-pooled pyramid regions.

    ``class_token`` is (D,), ``patch_map`` is (g, g, D); returns (14, D).
    """
    if class_token.ndim != 1 or patch_map.ndim != 3:
        raise ShapeMismatch(
            f"expected (D,) class token and (g, g, D) map, got {class_token.shape}, {patch_map.shape}"
        )
    g, g2, d = patch_map.shape
    if g != g2 or d != class_token.shape[0]:
        raise ShapeMismatch(f"inconsistent shapes {class_token.shape} vs {patch_map.shape}")
    batched = spm_aggregate_batch(
        T.reshape(class_token, (1, d)), T.reshape(patch_map, (1, g, g, d)), p
    )
    return T.reshape(batched, (NUM_REGIONS, d))


def spm_aggregate_batch(class_tokens: Tensor, patch_maps: Tensor, p) -> Tensor:
    """Batched aggregation: (B, D) class tokens + (B, g, g, D) maps ->
    (B, 14, D) regional features."""
    b, g, _, d = patch_maps.shape
    feats = [T.reshape(class_tokens, (b, 1, d))]
    for rect in pyramid_regions(g)[1:]:
        rows = T.narrow(patch_maps, 1, rect.row0, rect.row1 - rect.row0)
        cells = T.narrow(rows, 2, rect.col0, rect.col1 - rect.col0)
        flat = T.reshape(cells, (b, (rect.row1 - rect.row0) * (rect.col1 - rect.col0), d))
        pooled = _gem_pooled(flat, p, axis=1)
        feats.append(T.reshape(pooled, (b, 1, d)))
    return T.concat(feats, axis=1)


def make_gem_p(init: float = 3.0, dtype=np.float32) -> Tensor:
    """The shared trainable GeM exponent, initialized at 3."""
    return Tensor(np.full((1,), init, dtype=dtype), requires_grad=True)


def clamp_gem_p(p: Tensor) -> None:
    """Keep the exponent in its stable window; call after each optimizer step."""
    np.clip(p.data, GEM_P_MIN, GEM_P_MAX, out=p.data)
