"""PCA fitting and projection for descriptor dimensionality reduction.

Fit on database descriptors only; transform queries with the same model.
Projections are L2-renormalized so cosine retrieval stays valid downstream.
Whitening is available behind a flag but off by default.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .encoder import GlobalDescriptor
from .errors import BadCheckpoint, DimMismatch, TooFewSamples

PCA_MAGIC = b"CPCA"


class RankDeficientWarning(UserWarning):
    """Requested more components than the sample covariance supports."""


@dataclass
class PcaModel:
    """Mean plus orthonormal principal directions in descending eigenvalue
    order; immutable after fit."""
    mean: np.ndarray         # (dim,)
    basis: np.ndarray        # (out_dim, dim), orthonormal rows
    eigenvalues: np.ndarray  # (out_dim,), nonincreasing, >= 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[0]


def pca_fit(descs: np.ndarray, out_dim: int) -> PcaModel:
    """Eigendecomposition of the sample covariance.

    Deterministic sign convention: the largest-magnitude component of each
    basis row is positive. When the covariance has rank below ``out_dim``
    the remaining rows come from the orthogonal complement (with a warning).
    """
    descs = np.asarray(descs, dtype=np.float64)
    if descs.ndim != 2:
        raise DimMismatch(f"expected (n, dim) descriptors, got {descs.shape}")
    n, dim = descs.shape
    if out_dim < 1 or out_dim > dim:
        raise DimMismatch(f"out_dim {out_dim} not in [1, {dim}]")
    if n <= out_dim:
        raise TooFewSamples(f"{n} samples cannot support {out_dim} components")
    mean = descs.mean(axis=0)
    centered = descs - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigvals, kind="stable")[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    basis = eigvecs[:, order].T  # rows are principal directions
    rank = int(np.sum(eigvals > eigvals[0] * 1e-12)) if eigvals[0] > 0 else 0
    if rank < out_dim:
        warnings.warn(
            f"covariance rank {rank} < requested {out_dim}; "
            "padding with orthogonal-complement directions",
            RankDeficientWarning,
        )
    basis = basis[:out_dim]
    flip = np.sign(basis[np.arange(out_dim), np.abs(basis).argmax(axis=1)])
    basis = basis * flip[:, None]
    return PcaModel(mean=mean, basis=basis, eigenvalues=eigvals[:out_dim])


def transform_matrix(vectors: np.ndarray, model: PcaModel, whiten: bool = False,
                     renormalize: bool = True) -> np.ndarray:
    """Project (n, dim) rows; optionally whiten; L2-renormalize by default."""
    vectors = np.asarray(vectors, dtype=np.float64)
    squeeze = vectors.ndim == 1
    vectors = np.atleast_2d(vectors)
    if vectors.shape[1] != model.dim:
        raise DimMismatch(f"vector dim {vectors.shape[1]} != model dim {model.dim}")
    proj = (vectors - model.mean) @ model.basis.T
    if whiten:
        proj = proj / np.sqrt(model.eigenvalues + 1e-12)
    if renormalize:
        norms = np.linalg.norm(proj, axis=1, keepdims=True)
        proj = proj / np.maximum(norms, 1e-12)
    return proj[0] if squeeze else proj


def pca_transform(desc: GlobalDescriptor, model: PcaModel,
                  whiten: bool = False) -> GlobalDescriptor:
    reduced = transform_matrix(desc.vector, model, whiten=whiten)
    return GlobalDescriptor(image_id=desc.image_id, vector=reduced.astype(np.float32))


# ---------------------------------------------------------------------------
# file format: "CPCA" magic, u32 dim, u32 out_dim, then mean (dim), basis rows
# (out_dim x dim), eigenvalues (out_dim), all float32 little-endian.
# ---------------------------------------------------------------------------

def save_pca(path, model: PcaModel) -> None:
    with open(path, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(struct.pack("<II", model.dim, model.out_dim))
        fh.write(np.ascontiguousarray(model.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.basis, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.eigenvalues, dtype="<f4").tobytes())


def load_pca(path) -> PcaModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PCA_MAGIC:
            raise BadCheckpoint(f"{path}: not a PCA model file (magic {magic!r})")
        dim, out_dim = struct.unpack("<II", fh.read(8))
        mean = np.frombuffer(fh.read(dim * 4), dtype="<f4").astype(np.float64)
        basis = np.frombuffer(fh.read(out_dim * dim * 4), dtype="<f4").astype(np.float64)
        eig = np.frombuffer(fh.read(out_dim * 4), dtype="<f4").astype(np.float64)
    return PcaModel(mean=mean, basis=basis.reshape(out_dim, dim), eigenvalues=eig)
