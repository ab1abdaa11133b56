"""Clustering extraction and scoring: K-means, NMI and best-matching accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_RESTARTS = 20


@dataclass
class ClusteringResult:
    assignments: list
    inertia: list
    history: list = field(default_factory=list)

    @property
    def best(self) -> int:
        return int(np.argmin(self.inertia))


@dataclass
class ScoreReport:
    nmi: list
    ac: list

    @property
    def nmi_mean(self) -> float:
        return float(np.mean(self.nmi))

    @property
    def nmi_std(self) -> float:
        return float(np.std(self.nmi))

    @property
    def ac_mean(self) -> float:
        return float(np.mean(self.ac))

    @property
    def ac_std(self) -> float:
        return float(np.std(self.ac))

    def to_dict(self) -> dict:
        return {"restarts": len(self.nmi),
                "nmi_mean": self.nmi_mean, "nmi_std": self.nmi_std,
                "ac_mean": self.ac_mean, "ac_std": self.ac_std,
                "nmi": [float(x) for x in self.nmi], "ac": [float(x) for x in self.ac]}


def _lloyd(X, centers, max_iter):
    sq = np.einsum("ij,ij->i", X, X)
    history = []
    labels = None
    for _ in range(max_iter):
        d = sq[:, None] - 2.0 * X @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
        np.maximum(d, 0.0, out=d)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=len(centers))
        centers = np.zeros_like(centers)
        np.add.at(centers, labels, X)
        for c in np.flatnonzero(counts == 0):
            # re-seed from the point farthest from its assigned center
            far = int(np.argmax(d[np.arange(len(X)), labels]))
            centers[c] = X[far]
            counts[c] = 1
            d[far, :] = 0.0
        nonempty = counts > 0
        centers[nonempty] /= counts[nonempty, None]
    d = sq[:, None] - 2.0 * X @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
    np.maximum(d, 0.0, out=d)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(X)), labels].sum())
    return labels, inertia, history


def kmeans(points, k: int, restarts: int = DEFAULT_RESTARTS, seed=0,
           max_iter: int = 300) -> ClusteringResult:
    """Lloyd's algorithm from ``restarts`` seeded initializations.

    Each restart starts from ``k`` distinct rows drawn uniformly at random and
    iterates until the assignment stops changing (or ``max_iter``).
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"points must be a 2-d array, got shape {X.shape}")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    result = ClusteringResult([], [], [])
    for _ in range(restarts):
        centers = X[rng.choice(n, size=k, replace=False)].copy()
        labels, inertia, history = _lloyd(X, centers, max_iter)
        result.assignments.append(labels)
        result.inertia.append(inertia)
        result.history.append(history)
    return result


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"label vectors must have equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("label vectors must be non-empty")
    return a, b


def contingency(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _entropy(counts, n):
    return -math.fsum(c / n * math.log(c / n) for c in counts if c > 0)


def nmi(labels_a, labels_b) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Returns 0 when either partition has a single cluster.
    """
    table = contingency(labels_a, labels_b)
    n = int(table.sum())
    ra, rb = table.sum(axis=1), table.sum(axis=0)
    ha, hb = _entropy(ra, n), _entropy(rb, n)
    if ha == 0.0 or hb == 0.0:
        return 0.0
    # the summand is symmetric in (i, j) and fsum is order-independent
    mi = math.fsum(
        c / n * math.log(c * n / (ra[i] * rb[j]))
        for (i, j), c in np.ndenumerate(table) if c > 0
    )
    return float(min(max(mi / ((ha + hb) / 2.0), 0.0), 1.0))


def accuracy(predicted, truth) -> float:
    """Fraction matched under the best one-to-one map from clusters to labels."""
    table = contingency(predicted, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / float(table.sum())


def score_consensus(consensus, labels, k: int, restarts: int = DEFAULT_RESTARTS, seed=0) -> ScoreReport:
    """K-means on the consensus rows, scoring every restart against ``labels``."""
    if labels is None:
        raise ValueError("ground-truth labels are required for scoring")
    labels = np.asarray(labels)
    consensus = np.asarray(consensus, dtype=np.float64)
    if labels.shape != (consensus.shape[0],):
        raise ValueError(f"expected {consensus.shape[0]} labels, got {labels.shape}")
    result = kmeans(consensus, k, restarts, seed)
    return ScoreReport([nmi(a, labels) for a in result.assignments],
                       [accuracy(a, labels) for a in result.assignments])


def score_run(report, labels, k: int, restarts: int = DEFAULT_RESTARTS, seed=0) -> ScoreReport:
    """Score the final consensus of a run report."""
    return score_consensus(report.consensus, labels, k, restarts, seed)
