"""Cluster refinement of unknown-object embeddings.

Embeddings of detections that landed in unknown slots are clustered so each
recovered cluster can serve as one unknown class. Centroids start from
seeded k-means; refinement then alternates a sharpened target distribution
with gradient descent of the KL divergence between target and soft
assignment, tightening clusters while the target is held fixed between
recomputations.

Soft assignments use the heavy-tailed inverse-quadratic kernel
``1 / (1 + squared distance)``; the target distribution squares assignments
and normalizes by cluster frequency so large clusters cannot swallow the
rest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

LOG_FLOOR = 1e-12


def kmeans_init(points: np.ndarray, n_clusters: int, seed: int = 0) -> np.ndarray:
    """Deterministic k-means: distance-squared weighted seeding followed by
    Lloyd iterations (at most 100, stopping once centroids move < 1e-6).

    Requires at least as many points as clusters. Empty clusters are re-
    seeded to the point currently farthest from its centroid.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"points must be 2-d, got shape {X.shape}")
    m = len(X)
    if n_clusters < 1:
        raise ValueError(f"need at least one cluster, got {n_clusters}")
    if m < n_clusters:
        raise ValueError(f"{m} points cannot seed {n_clusters} clusters")
    rng = np.random.default_rng(seed)

    centroids = np.empty((n_clusters, X.shape[1]), dtype=float)
    centroids[0] = X[rng.integers(m)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(m, p=d2 / total)
        else:
            idx = rng.integers(m)  # all remaining points coincide
        centroids[c] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[c]) ** 2).sum(axis=1))

    for _ in range(100):
        dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        new_centroids = centroids.copy()
        for c in range(n_clusters):
            members = assign == c
            if members.any():
                new_centroids[c] = X[members].mean(axis=0)
            else:
                farthest = int(dists[np.arange(m), assign].argmax())
                new_centroids[c] = X[farthest]
                assign[farthest] = c
        movement = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if movement < 1e-6:
            break
    return centroids


def silhouette_score(points: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette over all points under Euclidean distance.

    Points in singleton clusters contribute 0, matching the usual
    convention. Requires at least two distinct clusters.
    """
    X = np.asarray(points, dtype=float)
    assign = np.asarray(assignments)
    cluster_ids = np.unique(assign)
    if len(cluster_ids) < 2:
        raise ValueError("silhouette needs at least two clusters")
    dists = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2))
    scores = np.zeros(len(X))
    for i in range(len(X)):
        same = assign == assign[i]
        n_same = int(same.sum())
        if n_same <= 1:
            continue
        within = dists[i][same].sum() / (n_same - 1)
        nearest_other = min(
            dists[i][assign == c].mean() for c in cluster_ids if c != assign[i]
        )
        denom = max(within, nearest_other)
        if denom > 0:
            scores[i] = (nearest_other - within) / denom
    return float(scores.mean())


def select_cluster_count(points: np.ndarray, max_clusters: int, seed: int = 0) -> int:
    """Pick a cluster count in [2, max_clusters] by mean silhouette under
    seeded k-means, preferring the largest count within 10% of the best
    score (coarse splits of nested structure otherwise shadow the finer
    one). Falls back to 1 when the points cannot support two clusters.
    """
    X = np.asarray(points, dtype=float)
    m = len(X)
    scores: dict[int, float] = {}
    for k in range(2, min(max_clusters, m - 1) + 1):
        centroids = kmeans_init(X, k, seed=seed)
        assign = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
        if len(np.unique(assign)) < 2:
            continue
        scores[k] = silhouette_score(X, assign)
    if not scores:
        return 1
    best = max(scores.values())
    threshold = best - 0.1 * abs(best)
    return max(k for k, score in scores.items() if score >= threshold)


def soft_assignment(embeddings: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Row-stochastic soft assignment of embeddings to centroids under the
    inverse-quadratic kernel."""
    E = np.asarray(embeddings, dtype=float)
    C = np.asarray(centroids, dtype=float)
    if len(C) == 0:
        raise ValueError("need at least one centroid")
    d2 = ((E[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    kernel = 1.0 / (1.0 + d2)
    return kernel / kernel.sum(axis=1, keepdims=True)


def target_distribution(assignment: np.ndarray) -> np.ndarray:
    """Sharpened, frequency-normalized target built from a soft assignment.

    Squaring emphasizes confident assignments; dividing by the per-cluster
    frequency (column sum) stops the largest clusters from dominating the
    target. Rows renormalize to 1. A cluster with zero total mass has no
    defined target and raises.
    """
    P = np.asarray(assignment, dtype=float)
    if P.ndim != 2:
        raise ValueError(f"assignment must be 2-d, got shape {P.shape}")
    freq = P.sum(axis=0)
    if (freq <= 0).any():
        raise ValueError(f"clusters with zero frequency: {np.flatnonzero(freq <= 0).tolist()}")
    weighted = (P * P) / freq
    return weighted / weighted.sum(axis=1, keepdims=True)


def kl_divergence(target: np.ndarray, assignment: np.ndarray) -> float:
    """KL divergence of the assignment from the fixed target,
    ``sum(Q * log(Q / P))``. Zero target entries contribute nothing; logs are
    floored to stay finite. Negative entries are rejected. The true value is
    never negative, so rounding residue below zero is clamped away."""
    Q = np.asarray(target, dtype=float)
    P = np.asarray(assignment, dtype=float)
    if Q.shape != P.shape:
        raise ValueError(f"shape mismatch: target {Q.shape} vs assignment {P.shape}")
    if (Q < 0).any() or (P < 0).any():
        raise ValueError("distributions cannot hold negative mass")
    log_ratio = np.log(np.maximum(Q, LOG_FLOOR)) - np.log(np.maximum(P, LOG_FLOOR))
    return max(float(np.where(Q > 0, Q * log_ratio, 0.0).sum()), 0.0)


def kl_loss(
    target: np.ndarray,
    assignment: np.ndarray,
    embeddings: np.ndarray,
    centroids: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """KL refinement loss with analytic gradients.

    ``assignment`` must be the soft assignment of ``embeddings`` to
    ``centroids``; the target is treated as a constant. Returns
    ``(value, gradient wrt embeddings, gradient wrt centroids)``.
    """
    Q = np.asarray(target, dtype=float)
    E = np.asarray(embeddings, dtype=float)
    C = np.asarray(centroids, dtype=float)
    value = kl_divergence(Q, assignment)

    diff = E[:, None, :] - C[None, :, :]
    kernel = 1.0 / (1.0 + (diff**2).sum(axis=2))
    P = kernel / kernel.sum(axis=1, keepdims=True)
    # d KL / d distance^2 collapses to k * (P - Q) per pair
    coeff = kernel * (P - Q)
    grad_centroids = 2.0 * np.einsum("ij,ijd->jd", coeff, diff)
    grad_embeddings = -2.0 * np.einsum("ij,ijd->id", coeff, diff)
    return value, grad_embeddings, grad_centroids


@dataclass(frozen=True)
class ClusterState:
    """One refinement snapshot: centroids with the matching soft assignment
    and sharpened target."""

    centroids: np.ndarray
    assignment: np.ndarray
    target: np.ndarray

    def __post_init__(self) -> None:
        if self.assignment.shape != self.target.shape:
            raise ValueError("assignment and target shapes differ")
        if self.assignment.shape[1] != len(self.centroids):
            raise ValueError("assignment width must equal the centroid count")

    @property
    def frequencies(self) -> np.ndarray:
        """Per-cluster soft population."""
        return self.assignment.sum(axis=0)

    @classmethod
    def from_embeddings(cls, embeddings: np.ndarray, centroids: np.ndarray) -> "ClusterState":
        P = soft_assignment(embeddings, centroids)
        return cls(centroids=np.asarray(centroids, dtype=float), assignment=P, target=target_distribution(P))


@dataclass(frozen=True)
class RefineResult:
    centroids: np.ndarray
    assignments: np.ndarray
    embeddings: np.ndarray
    soft_assignments: np.ndarray
    kl_history: tuple[float, ...]
    steps_run: int


def refine(
    embeddings: np.ndarray,
    n_clusters: int,
    steps: int = 1000,
    lr: float = 0.1,
    seed: int = 0,
    *,
    target_interval: int = 10,
    update_embeddings: bool = True,
    min_change_fraction: float = 1e-3,
) -> RefineResult:
    """Cluster embeddings and tighten the clusters by KL descent.

    The target distribution is recomputed every ``target_interval`` steps;
    between recomputations each step must not increase the KL value, which a
    deterministic halving backoff of the step size enforces. Refinement
    stops early once the fraction of changed hard assignments between
    consecutive target recomputations falls below ``min_change_fraction``.
    Set ``update_embeddings=False`` to move centroids only.
    """
    E = np.array(embeddings, dtype=float)
    if E.ndim != 2 or len(E) == 0:
        raise ValueError("need a non-empty 2-d embedding matrix")
    if steps < 0 or lr <= 0:
        raise ValueError("steps must be >= 0 and lr positive")
    centroids = kmeans_init(E, n_clusters, seed)
    P = soft_assignment(E, centroids)
    Q = target_distribution(P)
    hard = P.argmax(axis=1)
    kl_history = [kl_divergence(Q, P)]
    step_lr = lr
    steps_run = 0

    for step in range(steps):
        if step > 0 and step % target_interval == 0:
            P = soft_assignment(E, centroids)
            new_hard = P.argmax(axis=1)
            changed = float(np.mean(new_hard != hard))
            hard = new_hard
            Q = target_distribution(P)
            if changed < min_change_fraction:
                break
        P = soft_assignment(E, centroids)
        value, grad_e, grad_c = kl_loss(Q, P, E, centroids)
        for _ in range(30):
            new_e = E - step_lr * grad_e if update_embeddings else E
            new_c = centroids - step_lr * grad_c
            if kl_divergence(Q, soft_assignment(new_e, new_c)) <= value + 1e-12:
                break
            step_lr /= 2.0
        E, centroids = new_e, new_c
        kl_history.append(kl_divergence(Q, soft_assignment(E, centroids)))
        steps_run = step + 1

    P = soft_assignment(E, centroids)
    return RefineResult(
        centroids=centroids,
        assignments=P.argmax(axis=1),
        embeddings=E,
        soft_assignments=P,
        kl_history=tuple(kl_history),
        steps_run=steps_run,
    )
