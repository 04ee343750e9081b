"""Descriptor database indexing, exact nearest-neighbor search, and Recall@N
under geo-threshold ground truth.

Manifest format: UTF-8 text, one record per line, whitespace separated:

    <image path> <place id> <x> <y>     planar geotag in meters
    <image path> <place id> <frame>     frame-number geotag

Lines starting with '#' are ignored. Ground-truth rules: euclidean threshold
on planar coordinates, frame offset, or unique counterpart (geotag equality).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .encoder import load_descriptors
from .errors import (
    DimMismatch,
    DuplicateId,
    EmptyIndex,
    MissingMetadata,
    MissingQuery,
    UnknownRule,
)


@dataclass(frozen=True)
class PlaceRecord:
    """One image: identity, place label, geotag (x, y) or (frame,)."""
    path: str
    place_id: int
    geotag: tuple[float, ...]


def parse_manifest(path) -> list[PlaceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise MissingMetadata(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            records.append(PlaceRecord(
                path=parts[0],
                place_id=int(parts[1]),
                geotag=tuple(float(v) for v in parts[2:]),
            ))
    return records


def write_manifest(path, records: Sequence[PlaceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image-path place-id geotag(x y | frame)\n")
        for r in records:
            coords = " ".join(f"{v:.6f}" for v in r.geotag)
            fh.write(f"{r.path} {r.place_id} {coords}\n")


@dataclass
class DescriptorIndex:
    """Immutable searchable database: unit-norm rows aligned with ids and geotags."""
    ids: list[str]
    matrix: np.ndarray            # (n, dim), rows renormalized
    geotags: np.ndarray           # (n, 1) or (n, 2)
    place_ids: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(descriptor_path, manifest_path) -> DescriptorIndex:
    ids, vectors = load_descriptors(descriptor_path)
    if len(ids) == 0:
        raise EmptyIndex(f"{descriptor_path}: no descriptors")
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DuplicateId(f"duplicate descriptor ids: {dupes[:5]}")
    by_path = {}
    for record in parse_manifest(manifest_path):
        by_path[record.path] = record
    missing = [i for i in ids if i not in by_path]
    if missing:
        raise MissingMetadata(f"ids absent from manifest: {missing[:5]}")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    matrix = vectors / np.maximum(norms, 1e-12)
    geotags = np.array([by_path[i].geotag for i in ids], dtype=np.float64)
    place_ids = np.array([by_path[i].place_id for i in ids], dtype=np.int64)
    return DescriptorIndex(ids=list(ids), matrix=matrix.astype(np.float32),
                           geotags=geotags, place_ids=place_ids)


def knn(index: DescriptorIndex, query: np.ndarray, n: int) -> list[tuple[str, float]]:
    """Exact top-n by cosine similarity, descending; ties resolved by
    ascending database position."""
    query = np.asarray(query, dtype=np.float32).reshape(-1)
    if query.shape[0] != index.dim:
        raise DimMismatch(f"query dim {query.shape[0]} != index dim {index.dim}")
    if n < 1:
        raise ValueError("n must be >= 1")
    sims = index.matrix @ query
    order = np.argsort(-sims, kind="stable")[:n]
    return [(index.ids[i], float(sims[i])) for i in order]


def rank_all(index: DescriptorIndex, queries: np.ndarray, n: int) -> np.ndarray:
    """Top-n database positions for each query row; same tie rule as knn."""
    queries = np.asarray(queries, dtype=np.float32)
    if queries.shape[1] != index.dim:
        raise DimMismatch(f"query dim {queries.shape[1]} != index dim {index.dim}")
    sims = queries @ index.matrix.T
    return np.argsort(-sims, axis=1, kind="stable")[:, :n]


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

def parse_rule(spec: str):
    """'euclidean:25', 'frame:10' or 'unique' -> rule callable."""
    parts = spec.split(":")
    kind = parts[0]
    if kind == "euclidean":
        if len(parts) != 2:
            raise UnknownRule(f"euclidean rule needs a threshold: {spec!r}")
        return EuclideanThreshold(float(parts[1]))
    if kind == "frame":
        if len(parts) != 2:
            raise UnknownRule(f"frame rule needs an offset: {spec!r}")
        return FrameOffset(int(parts[1]))
    if kind == "unique":
        return UniquePair()
    raise UnknownRule(f"unknown ground-truth rule {spec!r}")


@dataclass(frozen=True)
class EuclideanThreshold:
    threshold: float

    def positives(self, db_geotags: np.ndarray, query_geotag: np.ndarray) -> set[int]:
        if db_geotags.shape[1] != 2:
            raise UnknownRule("euclidean rule needs planar (x, y) geotags")
        d2 = ((db_geotags - query_geotag[None, :]) ** 2).sum(axis=1)
        return set(np.flatnonzero(d2 <= self.threshold ** 2).tolist())


@dataclass(frozen=True)
class FrameOffset:
    offset: int

    def positives(self, db_geotags: np.ndarray, query_geotag: np.ndarray) -> set[int]:
        frames = db_geotags[:, 0]
        return set(np.flatnonzero(np.abs(frames - query_geotag[0]) <= self.offset).tolist())


@dataclass(frozen=True)
class UniquePair:
    def positives(self, db_geotags: np.ndarray, query_geotag: np.ndarray) -> set[int]:
        match = np.all(db_geotags == query_geotag[None, :], axis=1)
        return set(np.flatnonzero(match).tolist())


def ground_truth(db_geotags: np.ndarray, query_geotags: np.ndarray, rule) -> list[set[int]]:
    """Positive database indices per query, derived solely from geotags."""
    if isinstance(rule, str):
        rule = parse_rule(rule)
    db_geotags = np.atleast_2d(np.asarray(db_geotags, dtype=np.float64))
    query_geotags = np.atleast_2d(np.asarray(query_geotags, dtype=np.float64))
    return [rule.positives(db_geotags, q) for q in query_geotags]


def recall_at_n(rankings: Sequence[Optional[Sequence[int]]], gt: Sequence[set[int]],
                ns: Sequence[int]) -> dict[int, float]:
    """Percentage of queries whose top-N retrieval hits a positive.

    Queries with empty positive sets are excluded from the denominator;
    every remaining query must come with a ranking.
    """
    if len(rankings) != len(gt):
        raise MissingQuery(f"{len(rankings)} rankings for {len(gt)} queries")
    ns = sorted(set(int(n) for n in ns))
    evaluable = [i for i, positives in enumerate(gt) if positives]
    if not evaluable:
        return {n: 0.0 for n in ns}
    hits = {n: 0 for n in ns}
    for i in evaluable:
        ranking = rankings[i]
        if ranking is None:
            raise MissingQuery(f"query {i} has positives but no ranking")
        positives = gt[i]
        for n in ns:
            if any(int(r) in positives for r in list(ranking)[:n]):
                hits[n] += 1
    return {n: 100.0 * hits[n] / len(evaluable) for n in ns}
