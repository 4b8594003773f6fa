"""Embedding-space document merging.

Two rules decide which documents survive when two agents are combined:

* ellipse merge keeps documents whose summed distance to both centroids is at
  most the average summed distance over the union (agents that agree);
* hyperbola merge keeps documents that are closer to the retained centroid
  than to the discarded one by more than the difference of the mean distances
  (an incorrect agent folded into a retained one).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InputValidationError


@dataclass(frozen=True)
class DocumentCluster:
    """A nonempty set of documents with their vectors and arithmetic-mean centroid.

    ``doc_ids`` keeps insertion order so iteration is deterministic.
    """

    doc_ids: tuple[str, ...]
    vectors: Mapping[str, np.ndarray] = field(repr=False, compare=False)
    centroid: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_members(cls, doc_ids: Sequence[str], vectors: Sequence[np.ndarray]) -> "DocumentCluster":
        if not doc_ids:
            raise InputValidationError("a cluster needs at least one document")
        if len(doc_ids) != len(vectors):
            raise InputValidationError("doc_ids and vectors differ in length")
        if len(set(doc_ids)) != len(doc_ids):
            raise InputValidationError("duplicate doc ids within a cluster")
        mat = np.asarray([np.asarray(v, dtype=float) for v in vectors])
        if mat.ndim != 2:
            raise InputValidationError("cluster vectors must share one dimension")
        vecs = {d: mat[i] for i, d in enumerate(doc_ids)}
        return cls(tuple(doc_ids), vecs, mat.mean(axis=0))

    @property
    def dim(self) -> int:
        return int(self.centroid.shape[0])

    def __len__(self) -> int:
        return len(self.doc_ids)

    def matrix(self) -> np.ndarray:
        return np.asarray([self.vectors[d] for d in self.doc_ids])

    def subset(self, keep: Sequence[str]) -> "DocumentCluster":
        return DocumentCluster.from_members(list(keep), [self.vectors[d] for d in keep])


@dataclass(frozen=True)
class MergeResult:
    kept_doc_ids: tuple[str, ...]
    thresholds: dict[str, float]
    fallback: bool = False

    def to_cluster(self, *clusters: DocumentCluster) -> DocumentCluster:
        """Rebuild a cluster (with recomputed centroid) from the kept documents."""
        pool: dict[str, np.ndarray] = {}
        for c in clusters:
            pool.update(c.vectors)
        return DocumentCluster.from_members(list(self.kept_doc_ids), [pool[d] for d in self.kept_doc_ids])


def euclidean_distance(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def _union(ci: DocumentCluster, cj: DocumentCluster) -> tuple[list[str], np.ndarray]:
    if ci.dim != cj.dim:
        raise InputValidationError(f"dimension mismatch: {ci.dim} vs {cj.dim}")
    overlap = set(ci.doc_ids) & set(cj.doc_ids)
    if overlap:
        raise InputValidationError(f"clusters share documents: {sorted(overlap)}")
    ids = list(ci.doc_ids) + list(cj.doc_ids)
    return ids, np.vstack([ci.matrix(), cj.matrix()])


def _mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / len(values)


def ellipse_merge(cluster_i: DocumentCluster, cluster_j: DocumentCluster) -> MergeResult:
    ids, X = _union(cluster_i, cluster_j)
    summed = np.linalg.norm(X - cluster_i.centroid, axis=1) + np.linalg.norm(X - cluster_j.centroid, axis=1)
    t_ij = _mean(summed)
    kept = tuple(d for d, s in zip(ids, summed) if s <= t_ij)
    return MergeResult(kept, {"T_ij": t_ij})


def hyperbola_merge(retained: DocumentCluster, discarded: DocumentCluster) -> MergeResult:
    """Fold ``discarded`` into ``retained``.

    Falls back to the retained documents unchanged if no document passes.
    """
    ids, X = _union(retained, discarded)
    d_i = np.linalg.norm(X - retained.centroid, axis=1)
    d_j = np.linalg.norm(X - discarded.centroid, axis=1)
    t_i = _mean(d_i)
    t_j = _mean(d_j)
    margin = t_j - t_i
    kept = tuple(d for d, a, b in zip(ids, d_i, d_j) if b - a > margin)
    thresholds = {"T_i": t_i, "T_j": t_j}
    if not kept:
        return MergeResult(retained.doc_ids, thresholds, fallback=True)
    return MergeResult(kept, thresholds)


def nearest_remaining_cluster(incorrect: DocumentCluster, remaining: Sequence[DocumentCluster]) -> int:
    if not remaining:
        raise InputValidationError("no remaining clusters to merge into")
    dists = [euclidean_distance(incorrect.centroid, c.centroid) for c in remaining]
    # list.index returns the first minimum, i.e. ties go to the lowest index
    return dists.index(min(dists))
