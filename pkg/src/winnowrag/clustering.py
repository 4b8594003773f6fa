"""K-means over query-aware embeddings and the initial agent assignment."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agents import AgentState
from .documents import RetrievedDocument
from .errors import InputValidationError
from .geometry import DocumentCluster

DEFAULT_K = 10
MAX_ITER = 100
TOL = 1e-6


@dataclass
class ClusterAssignment:
    labels: list[int]
    centroids: np.ndarray
    k_effective: int
    # within-cluster sum of squares after each Lloyd iteration
    objective_trace: list[float] = field(default_factory=list)
    n_iter: int = 0


def _as_matrix(vectors: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    if len(vectors) == 0:
        raise InputValidationError("vectors must be nonempty")
    try:
        X = np.asarray(vectors, dtype=float)
    except ValueError as exc:
        raise InputValidationError(f"vectors must share one dimension: {exc}") from exc
    if X.ndim != 2 or X.shape[1] == 0:
        raise InputValidationError("vectors must be a nonempty sequence of equal-length vectors")
    return X


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[idx].copy()


def _means(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    C = np.zeros((k, X.shape[1]))
    for j in range(k):
        C[j] = X[labels == j].mean(axis=0)
    return C


def _wcss(X: np.ndarray, labels: np.ndarray, C: np.ndarray) -> float:
    return float(np.sum((X - C[labels]) ** 2))


def kmeans_cluster(
    vectors: Sequence[Sequence[float]] | np.ndarray,
    k: int,
    seed: int = 0,
    *,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    ``k`` is clamped to the number of distinct vectors. When a cluster empties
    during iteration it receives the point currently farthest from its own
    centroid. Labels are renumbered by first appearance so the output is
    independent of internal center order.
    """
    X = _as_matrix(vectors)
    if k < 1:
        raise InputValidationError("k must be >= 1")
    n_distinct = np.unique(X, axis=0).shape[0]
    k_eff = min(k, n_distinct)
    rng = np.random.default_rng(seed)

    C = _kmeans_pp(X, k_eff, rng)
    trace: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels = np.argmin(_sq_dists(X, C), axis=1)
        labels = _repair_empty(X, labels, C, k_eff)
        new_C = _means(X, labels, k_eff)
        trace.append(_wcss(X, labels, new_C))
        shift = float(np.max(np.linalg.norm(new_C - C, axis=1)))
        C = new_C
        if shift < tol:
            break

    # canonical relabel: cluster of the first document is 0, and so on
    order: dict[int, int] = {}
    for lab in labels.tolist():
        order.setdefault(lab, len(order))
    canon = np.array([order[lab] for lab in labels.tolist()])
    centroids = _means(X, canon, k_eff)
    return ClusterAssignment(
        labels=canon.tolist(),
        centroids=centroids,
        k_effective=k_eff,
        objective_trace=trace,
        n_iter=n_iter,
    )


def _repair_empty(X: np.ndarray, labels: np.ndarray, C: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        d = np.sum((X - C[labels]) ** 2, axis=1)
        # a donor must keep at least one member
        d[counts[labels] < 2] = -1.0
        far = int(np.argmax(d))
        labels[far] = int(empty[0])
        C = C.copy()
        C[empty[0]] = X[far]


def assign_agents(
    assignment: ClusterAssignment,
    docs: Sequence[RetrievedDocument],
    vectors: Sequence[Sequence[float]] | np.ndarray,
) -> list[AgentState]:
    """One agent per nonempty cluster, numbered 1.. in label order.

    Each agent caches the centroid from ``assignment``.
    """
    if len(assignment.labels) != len(docs) or len(vectors) != len(docs):
        raise InputValidationError(
            f"length mismatch: {len(assignment.labels)} labels, {len(docs)} docs, {len(vectors)} vectors"
        )
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(assignment.labels):
        groups.setdefault(int(lab), []).append(i)
    agents = []
    for n, lab in enumerate(sorted(groups), 1):
        members = groups[lab]
        cluster = DocumentCluster.from_members(
            [docs[i].doc_id for i in members],
            [np.asarray(vectors[i], dtype=float) for i in members],
        )
        if lab < len(assignment.centroids):
            cluster = DocumentCluster(cluster.doc_ids, cluster.vectors, np.asarray(assignment.centroids[lab]))
        agents.append(AgentState(agent_id=n, cluster=cluster, members=(n,)))
    return agents
