"""Planted multi-view data with a shared cluster structure.

Each view ``v`` has a nonnegative basis ``U_v`` (``D_v x k``, uniform(0, 1)
entries). Instance ``i`` with label ``c`` gets latent coordinates
``e_c + spread * u`` (``u`` uniform(0, 1)) shared by all views, and
``x_i = amplitude * (U_v @ latent_i + noise * |z|)`` with ``z`` standard
normal. With ``noise == 0`` every view is exactly rank ``k`` and nonnegative.

``amplitude`` sets the overall magnitude of the features. It matters because
the reconstruction error grows with the square of the feature scale while the
view-agreement penalty grows only linearly, so a fixed agreement weight binds
harder on small-magnitude data.

Rows are generated in fixed blocks, each seeded from ``(seed, view, block)``,
so any row range can be produced on demand without materializing the data.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .dataset import MultiViewSource

BLOCK_ROWS = 1024


@dataclass(frozen=True)
class PlantedModel:
    n_clusters: int
    per_cluster: int
    dims: tuple
    noise: float = 0.05
    spread: float = 0.1
    seed: int = 0
    amplitude: float = 0.01

    def __post_init__(self):
        if self.n_clusters < 1 or self.per_cluster < 1:
            raise ValueError("cluster count and per-cluster count must be positive")
        if not self.dims or any(int(d) < 1 for d in self.dims):
            raise ValueError("every view needs a positive dimension")
        if self.noise < 0 or self.spread < 0:
            raise ValueError("noise and spread must be >= 0")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be > 0")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n_instances(self) -> int:
        return self.n_clusters * self.per_cluster

    def labels(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0])
        return rng.permutation(np.repeat(np.arange(self.n_clusters), self.per_cluster))

    def basis(self, v: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1, v])
        return rng.uniform(0.0, 1.0, size=(self.dims[v], self.n_clusters))

    def separation(self) -> float:
        """Smallest distance between two cluster prototypes, over views, in units
        of the expected noise-vector norm (``inf`` when noise is zero)."""
        best = np.inf
        for v, d in enumerate(self.dims):
            U = self.basis(v)
            for a, b in combinations(range(self.n_clusters), 2):
                dist = np.linalg.norm(U[:, a] - U[:, b])
                scale = self.noise * np.sqrt(d)
                best = min(best, dist / scale if scale > 0 else np.inf)
        return float(best)

    def rows(self, v: int, start: int, stop: int, labels=None, basis=None) -> np.ndarray:
        labels = self.labels() if labels is None else labels
        basis = self.basis(v) if basis is None else basis
        out = np.empty((stop - start, self.dims[v]))
        for b in range(start // BLOCK_ROWS, (stop - 1) // BLOCK_ROWS + 1 if stop > start else 0):
            lo, hi = b * BLOCK_ROWS, min((b + 1) * BLOCK_ROWS, self.n_instances)
            block = self._block(v, b, lo, hi, labels, basis)
            a, z = max(lo, start), min(hi, stop)
            out[a - start:z - start] = block[a - lo:z - lo]
        return out

    def _block(self, v, b, lo, hi, labels, basis):
        # the latent draw depends on the block only, so all views share it
        lat_rng = np.random.default_rng([self.seed, 2, b])
        latent = self.spread * lat_rng.uniform(0.0, 1.0, size=(hi - lo, self.n_clusters))
        latent[np.arange(hi - lo), labels[lo:hi]] += 1.0
        noise_rng = np.random.default_rng([self.seed, 3, v, b])
        x = np.abs(noise_rng.standard_normal((hi - lo, self.dims[v])))
        x *= self.noise
        x += latent @ basis.T
        x *= self.amplitude
        return x

    def blocks(self, v: int, block_rows: int = BLOCK_ROWS):
        labels, basis = self.labels(), self.basis(v)
        for lo in range(0, self.n_instances, block_rows):
            yield self.rows(v, lo, min(lo + block_rows, self.n_instances), labels, basis)

    def dense(self) -> list[np.ndarray]:
        return [self.rows(v, 0, self.n_instances) for v in range(len(self.dims))]


class PlantedSource(MultiViewSource):
    """Streaming source over a :class:`PlantedModel`; rows are generated on read."""

    def __init__(self, model: PlantedModel, presence=None):
        super().__init__(model.dims, model.n_instances, presence, model.labels())
        self.model = model
        self._bases = [model.basis(v) for v in range(len(model.dims))]

    def read(self, start, stop):
        self._check_range(start, stop)
        return [self.model.rows(v, start, stop, self.labels, self._bases[v])
                for v in range(self.n_views)]


def planted_source(n_clusters: int, per_cluster: int, dims: Sequence[int], noise: float = 0.05,
                   seed: int = 0, spread: float = 0.1, amplitude: float = 0.01) -> PlantedSource:
    return PlantedSource(PlantedModel(n_clusters, per_cluster, tuple(dims), noise, spread, seed,
                                      amplitude))
