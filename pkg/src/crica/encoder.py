"""Cross-image encoder and descriptor finalization.

The i-th regional features of all B images in a batch form a length-B
sequence; one shared-weight stack of post-LN transformer layers processes
each of the 14 sequences independently, letting every image attend to its
batch co-members at each pyramid scale. No positional encoding is added over
the batch axis, so encoding is batch-permutation equivariant.

Layers are post-LN, unlike the pre-LN backbone:

    z'    = LN(MHA(z) + z)
    z_out = LN(MLP(z') + z')

Finalization flattens the 14 regional features region-major and
L2-normalizes, giving one unit-norm 14*D descriptor per image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .aggregation import NUM_REGIONS
from .errors import BadCheckpoint, ConfigError, RaggedSequences, ZeroVector
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class CricaConfig:
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_hidden: int = 2048

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("cross-image encoder needs at least one layer")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")


@dataclass
class CricaLayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    _ORDER = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
              "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln2_g", "ln2_b")

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for name in self._ORDER:
            yield name, getattr(self, name)


@dataclass
class CricaParams:
    layers: list[CricaLayerParams]

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_params():
                yield f"layer{i}.{name}", p


def init_crica(cfg: CricaConfig, rng: np.random.Generator, dtype=np.float32) -> CricaParams:
    """All encoder parameters are trainable."""
    d, h = cfg.embed_dim, cfg.mlp_hidden

    def gauss(*shape):
        return Tensor(rng.normal(0.0, 0.02, shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    layers = [
        CricaLayerParams(
            wq=gauss(d, d), bq=zeros(d), wk=gauss(d, d), bk=zeros(d),
            wv=gauss(d, d), bv=zeros(d), wo=gauss(d, d), bo=zeros(d),
            ln1_g=ones(d), ln1_b=zeros(d),
            mlp_w1=gauss(d, h), mlp_b1=zeros(h),
            mlp_w2=gauss(h, d), mlp_b2=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
        )
        for _ in range(cfg.layers)
    ]
    return CricaParams(layers=layers)


def crica_param_count(cfg: CricaConfig) -> int:
    d, h = cfg.embed_dim, cfg.mlp_hidden
    per_layer = 4 * (d * d + d) + (d * h + h) + (h * d + d) + 4 * d
    return cfg.layers * per_layer


def regional_sequences(batch_feats: Tensor) -> Tensor:
    """(B, 14, D) regional features -> (14, B, D): sequence i holds the i-th
    regional feature of every image. Pure transpose, lossless."""
    return T.transpose(batch_feats, (1, 0, 2))


def regroup_sequences(seqs: Tensor) -> Tensor:
    """Inverse of ``regional_sequences``."""
    return T.transpose(seqs, (1, 0, 2))


def _attention(z: Tensor, p: CricaLayerParams, heads: int) -> Tensor:
    r, b, d = z.shape  # regions x batch x dim; attention runs over the batch axis
    hd = d // heads

    def split(x):
        return T.transpose(T.reshape(x, (r, b, heads, hd)), (0, 2, 1, 3))

    q = split(T.add(T.matmul(z, p.wq), p.bq))
    k = split(T.add(T.matmul(z, p.wk), p.bk))
    v = split(T.add(T.matmul(z, p.wv), p.bv))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (r, b, d))
    return T.add(T.matmul(ctx, p.wo), p.bo)


def cross_image_encode(seqs: Tensor, cfg: CricaConfig, params: CricaParams) -> Tensor:
    """Encode the stacked sequences (14, B, D) -> (B, 14, D).

    All 14 sequences share the same weights and never mix: attention runs
    within each sequence, over the batch axis only.
    """
    if seqs.ndim != 3 or seqs.shape[0] != NUM_REGIONS:
        raise RaggedSequences(f"expected ({NUM_REGIONS}, B, D) stacked sequences, got {seqs.shape}")
    z = seqs
    for layer in params.layers:
        z = T.layer_norm(T.add(_attention(z, layer, cfg.heads), z), layer.ln1_g, layer.ln1_b, eps=LN_EPS)
        h = T.relu(T.add(T.matmul(z, layer.mlp_w1), layer.mlp_b1))
        m = T.add(T.matmul(h, layer.mlp_w2), layer.mlp_b2)
        z = T.layer_norm(T.add(m, z), layer.ln2_g, layer.ln2_b, eps=LN_EPS)
    return regroup_sequences(z)


def flatten_and_normalize(feats: Tensor) -> Tensor:
    """(B, 14, D) -> (B, 14*D), region-major, unit L2 rows."""
    b, r, d = feats.shape
    return T.l2_normalize(T.reshape(feats, (b, r * d)), axis=1)


@dataclass
class GlobalDescriptor:
    """Final per-image representation: a unit-norm 14*D vector."""
    image_id: str
    vector: np.ndarray


def finalize_descriptor(feats: Tensor, image_id: str) -> GlobalDescriptor:
    """Flatten (14, D) regional features region-major and L2-normalize."""
    if feats.ndim != 2 or feats.shape[0] != NUM_REGIONS:
        raise RaggedSequences(f"expected ({NUM_REGIONS}, D) features, got {feats.shape}")
    flat = feats.data.reshape(-1)
    norm = float(np.linalg.norm(flat))
    if norm < 1e-12:
        raise ZeroVector(f"descriptor for {image_id!r} has zero norm")
    return GlobalDescriptor(image_id=image_id, vector=(flat / norm).astype(flat.dtype))


# ---------------------------------------------------------------------------
# descriptor file format: "CRCA" magic, u32 version, u32 count, u32 dim,
# count*dim float32 little-endian, then count length-prefixed UTF-8 ids.
# ---------------------------------------------------------------------------

DESC_MAGIC = b"CRCA"
DESC_VERSION = 1


def save_descriptors(path, ids: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError(f"{vectors.shape} vectors for {len(ids)} ids")
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<III", DESC_VERSION, vectors.shape[0], vectors.shape[1]))
        fh.write(vectors.tobytes())
        for image_id in ids:
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_descriptors(path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DESC_MAGIC:
            raise BadCheckpoint(f"{path}: not a descriptor file (magic {magic!r})")
        version, count, dim = struct.unpack("<III", fh.read(12))
        if version != DESC_VERSION:
            raise BadCheckpoint(f"{path}: unsupported descriptor version {version}")
        vectors = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
        ids = []
        for _ in range(count):
            (length,) = struct.unpack("<I", fh.read(4))
            ids.append(fh.read(length).decode("utf-8"))
    return ids, vectors.copy()
