"""Multi-view dataset storage, streaming, and dynamic filling of missing instances.

Matrices are held instance-major: the block for view ``v`` covering
instances ``[start, stop)`` has shape ``(stop - start, D_v)``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DENSE = "dense-text"
SPARSE = "sparse-coordinate"
STORAGE_KINDS = (DENSE, SPARSE)

# weight of a missing instance seen before any observation in its view
COLD_START_WEIGHT = 1e-6

_SCAN_BLOCK = 4096


class DatasetError(ValueError):
    """Malformed manifest, matrix file, indicator or label file."""


@dataclass(frozen=True)
class ViewSpec:
    view_id: int
    dim: int
    path: str
    storage: str = DENSE
    scale: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise DatasetError(f"view {self.view_id}: dim must be >= 1, got {self.dim}")
        if self.storage not in STORAGE_KINDS:
            raise DatasetError(f"view {self.view_id}: unknown storage {self.storage!r}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise DatasetError(f"view {self.view_id}: scale must be positive, got {self.scale}")


def validate_indicator(presence, n_instances: int, n_views: int) -> np.ndarray:
    """Return ``presence`` as an ``(N, n_v)`` boolean array or raise DatasetError."""
    m = np.asarray(presence)
    if m.shape != (n_instances, n_views):
        raise DatasetError(f"indicator shape {m.shape} != ({n_instances}, {n_views})")
    if not np.isin(m, (0, 1)).all():
        raise DatasetError("indicator entries must be 0 or 1")
    m = m.astype(bool)
    empty = np.flatnonzero(~m.any(axis=1))
    if empty.size:
        raise DatasetError(f"instance {int(empty[0])} is absent from every view")
    return m


class MultiViewSource:
    """Re-readable handle over ``n_v`` views of the same ``N`` instances.

    Subclasses implement :meth:`read`. Rows of absent instances are returned
    with arbitrary content; the presence table says which rows are real.
    """

    def __init__(self, dims: Sequence[int], n_instances: int, presence=None, labels=None):
        self.dims = tuple(int(d) for d in dims)
        self.n_instances = int(n_instances)
        if presence is None:
            presence = np.ones((self.n_instances, len(self.dims)), dtype=bool)
        self.presence = validate_indicator(presence, self.n_instances, len(self.dims))
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (self.n_instances,):
                raise DatasetError(f"expected {self.n_instances} labels, got {labels.shape[0]}")
        self.labels = labels

    @property
    def n_views(self) -> int:
        return len(self.dims)

    @property
    def is_complete(self) -> bool:
        return bool(self.presence.all())

    def missing_rates(self) -> np.ndarray:
        return 1.0 - self.presence.sum(axis=0) / self.n_instances

    def read(self, start: int, stop: int) -> list[np.ndarray]:
        raise NotImplementedError

    def with_presence(self, presence) -> "MultiViewSource":
        """Shallow copy sharing the data but using another indicator matrix."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.presence = validate_indicator(presence, self.n_instances, self.n_views)
        clone._reset()
        return clone

    def _reset(self):
        pass

    def _check_range(self, start, stop):
        if not 0 <= start <= stop <= self.n_instances:
            raise IndexError(f"range [{start}, {stop}) outside [0, {self.n_instances})")


class ArraySource(MultiViewSource):
    """In-memory source over ``N x D_v`` arrays (mostly for tests and small data)."""

    def __init__(self, views: Sequence[np.ndarray], presence=None, labels=None):
        views = [np.asarray(x, dtype=np.float64) for x in views]
        if not views:
            raise DatasetError("at least one view is required")
        n = views[0].shape[0]
        for v, x in enumerate(views):
            if x.ndim != 2 or x.shape[0] != n:
                raise DatasetError(f"view {v}: expected ({n}, D) array, got {x.shape}")
            _check_entries(x, f"view {v}")
        super().__init__([x.shape[1] for x in views], n, presence, labels)
        self.views = views

    def read(self, start, stop):
        self._check_range(start, stop)
        return [x[start:stop].copy() for x in self.views]


class _DenseReader:
    """Sequential reader for one-instance-per-line whitespace-separated files."""

    def __init__(self, path: Path, dim: int):
        self.path = path
        self.dim = dim
        self._fh = None
        self._pos = 0
        self._line = 0

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def _seek(self, start):
        if self._fh is None or start < self._pos:
            self.close()
            self._fh = open(self.path, "r")
            self._pos = 0
            self._line = 0
        while self._pos < start:
            if not self._fh.readline():
                raise DatasetError(f"{self.path}: file ends before instance {start}")
            self._pos += 1
            self._line += 1

    def read(self, start, stop) -> np.ndarray:
        self._seek(start)
        n = stop - start
        rows = [line.split() for line in islice(self._fh, n)]
        if len(rows) < n:
            raise DatasetError(f"{self.path}: expected {stop} rows, found {start + len(rows)}")
        for k, r in enumerate(rows):
            if len(r) != self.dim:
                raise DatasetError(
                    f"{self.path}:{self._line + k + 1}: expected {self.dim} values, got {len(r)}"
                )
        self._pos = stop
        self._line += n
        try:
            return np.array(rows, dtype=np.float64).reshape(n, self.dim)
        except ValueError as exc:
            raise DatasetError(f"{self.path}: {exc}") from None

    def has_trailing_rows(self) -> bool:
        return any(line.strip() for line in self._fh)


class _SparseReader:
    """Sequential reader for ``i j value`` lines sorted by ``(i, j)``, 0-based."""

    def __init__(self, path: Path, dim: int, n_instances: int):
        self.path = path
        self.dim = dim
        self.n_instances = n_instances
        self._fh = None
        self._pending = None
        self._last = (-1, -1)
        self._pos = 0
        self._line = 0

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def _next_entry(self):
        if self._pending is not None:
            entry, self._pending = self._pending, None
            return entry
        for line in self._fh:
            self._line += 1
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise DatasetError(f"{self.path}:{self._line}: expected 'i j value'")
            try:
                i, j, val = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise DatasetError(f"{self.path}:{self._line}: unparsable entry {line.strip()!r}") from None
            if not (0 <= i < self.n_instances and 0 <= j < self.dim):
                raise DatasetError(f"{self.path}:{self._line}: index ({i}, {j}) out of range")
            if (i, j) <= self._last:
                raise DatasetError(f"{self.path}:{self._line}: entries not strictly ascending in (i, j)")
            self._last = (i, j)
            return i, j, val
        return None

    def read(self, start, stop) -> np.ndarray:
        if self._fh is None or start < self._pos:
            self.close()
            self._fh = open(self.path, "r")
            self._pending = None
            self._last = (-1, -1)
            self._line = 0
        out = np.zeros((stop - start, self.dim))
        while True:
            entry = self._next_entry()
            if entry is None:
                break
            i, j, val = entry
            if i < start:
                continue
            if i >= stop:
                self._pending = entry
                break
            out[i - start, j] = val
        self._pos = stop
        return out

    def has_trailing_rows(self) -> bool:
        return self._next_entry() is not None


class FileSource(MultiViewSource):
    """Source backed by the files named in a manifest; streams rows on demand."""

    def __init__(self, specs: Sequence[ViewSpec], n_instances: int, presence=None, labels=None,
                 manifest_path: Path | None = None):
        super().__init__([s.dim for s in specs], n_instances, presence, labels)
        self.specs = tuple(specs)
        self.manifest_path = manifest_path
        self._readers = None

    def _make_readers(self):
        readers = []
        for entry in self.specs:
            if entry.storage == DENSE:
                readers.append(_DenseReader(Path(entry.path), entry.dim))
            else:
                readers.append(_SparseReader(Path(entry.path), entry.dim, self.n_instances))
        return readers

    def _reset(self):
        self._readers = None

    def close(self):
        for r in self._readers or ():
            r.close()
        self._readers = None

    def read(self, start, stop):
        self._check_range(start, stop)
        if self._readers is None:
            self._readers = self._make_readers()
        out = []
        for entry, reader in zip(self.specs, self._readers):
            block = reader.read(start, stop)
            if entry.scale != 1.0:
                block *= entry.scale
            out.append(block)
        return out

    def validate(self):
        """Stream every file once, checking shape and that entries are finite and >= 0."""
        for entry, reader in zip(self.specs, self._make_readers()):
            try:
                for start in range(0, self.n_instances, _SCAN_BLOCK):
                    stop = min(start + _SCAN_BLOCK, self.n_instances)
                    _check_entries(reader.read(start, stop), entry.path)
                if self.n_instances == 0:
                    reader.read(0, 0)
                if reader.has_trailing_rows():
                    raise DatasetError(
                        f"{entry.path}: dimension mismatch, more than n_instances={self.n_instances} rows"
                    )
            finally:
                reader.close()


def _check_entries(x: np.ndarray, where: str):
    if not np.isfinite(x).all():
        raise DatasetError(f"{where}: non-finite matrix entry")
    if (x < 0).any():
        raise DatasetError(f"{where}: negative matrix entry")


def open_dataset(manifest) -> FileSource:
    """Open and validate a dataset manifest (JSON).

    Relative paths inside the manifest are resolved against its directory.
    A missing ``indicator`` key means every instance is present in every view.
    """
    manifest = Path(manifest)
    try:
        meta = json.loads(manifest.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {manifest}: {exc}") from None
    base = manifest.parent
    try:
        n_views = int(meta["n_views"])
        n = int(meta["n_instances"])
        raw_views = meta["views"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{manifest}: missing or invalid key {exc}") from None
    if len(raw_views) != n_views:
        raise DatasetError(f"{manifest}: n_views={n_views} but {len(raw_views)} views listed")
    if n < 1:
        raise DatasetError(f"{manifest}: n_instances must be >= 1")
    specs = []
    for k, item in enumerate(sorted(raw_views, key=lambda d: int(d.get("id", 0)))):
        if int(item.get("id", k)) != k:
            raise DatasetError(f"{manifest}: view ids must be 0..{n_views - 1}")
        specs.append(ViewSpec(
            view_id=k,
            dim=int(item["dim"]),
            path=str(_resolve(base, item["path"])),
            storage=item.get("storage", DENSE),
            scale=float(item.get("scale", 1.0)),
        ))
    labels = None
    if meta.get("labels"):
        labels = read_labels(_resolve(base, meta["labels"]))
        if labels.shape[0] != n:
            raise DatasetError(f"expected {n} labels, got {labels.shape[0]}")
    presence = None
    if meta.get("indicator"):
        presence = read_indicator(_resolve(base, meta["indicator"]), n, n_views)
    source = FileSource(specs, n, presence, labels, manifest_path=manifest)
    source.validate()
    return source


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def read_labels(path) -> np.ndarray:
    try:
        with open(path) as fh:
            return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def read_indicator(path, n_instances: int, n_views: int) -> np.ndarray:
    try:
        with open(path) as fh:
            rows = [line.split() for line in fh if line.strip()]
        m = np.array(rows, dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return validate_indicator(m.reshape(len(rows), -1) if rows else m, n_instances, n_views)


def write_indicator(path, presence):
    with open(path, "w") as fh:
        for row in np.asarray(presence, dtype=np.int64):
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def write_labels(path, labels):
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(f"{int(lab)}\n")


def write_matrix(path, blocks: Iterable[np.ndarray], storage: str = DENSE):
    """Write row blocks (instance-major) in one of the two interchange formats.

    Values are written with 17 significant digits so a round trip is exact.
    """
    if storage not in STORAGE_KINDS:
        raise DatasetError(f"unknown storage {storage!r}")
    offset = 0
    with open(path, "w") as fh:
        for block in blocks:
            block = np.atleast_2d(np.asarray(block, dtype=np.float64))
            if storage == DENSE:
                for row in block:
                    fh.write(" ".join(format(float(x), ".17g") for x in row) + "\n")
            else:
                rows, cols = np.nonzero(block)
                for i, j in zip(rows, cols):
                    fh.write(f"{offset + int(i)} {int(j)} {format(float(block[i, j]), '.17g')}\n")
            offset += block.shape[0]


def write_manifest(path, specs: Sequence[ViewSpec], n_instances: int,
                   labels: str | None = None, indicator: str | None = None):
    """Write a manifest; view paths are stored relative to its directory when possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    meta = {
        "n_views": len(specs),
        "n_instances": int(n_instances),
        "views": [
            {"id": s.view_id, "dim": s.dim, "path": rel(s.path), "storage": s.storage, "scale": s.scale}
            for s in specs
        ],
        "labels": rel(labels) if labels else None,
        "indicator": rel(indicator) if indicator else None,
    }
    path.write_text(json.dumps(meta, indent=2) + "\n")


def simulate_missing(source: MultiViewSource, rate: float, seed: int) -> np.ndarray:
    """Delete ``floor(rate * N)`` instances from each view of a complete source.

    Views are processed in order. Each view draws its deletions uniformly from
    the instances that are still present in at least one other view, so no
    instance ever disappears from every view and the per-view count is exact
    whenever that is feasible. With a single view nothing can be deleted.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"missing rate must be in [0, 1), got {rate}")
    if not source.is_complete:
        raise DatasetError("source is already incomplete")
    n, n_views = source.n_instances, source.n_views
    presence = np.ones((n, n_views), dtype=bool)
    n_delete = int(math.floor(rate * n))
    if n_delete == 0:
        return presence
    rng = np.random.default_rng(seed)
    for v in range(n_views):
        others = np.delete(presence, v, axis=1)
        eligible = np.flatnonzero(others.any(axis=1)) if others.shape[1] else np.empty(0, dtype=np.int64)
        k = min(n_delete, eligible.size)
        if k < n_delete:
            warnings.warn(
                f"view {v}: only {k} of {n_delete} deletions possible without emptying an instance",
                RuntimeWarning, stacklevel=2,
            )
        presence[rng.choice(eligible, size=k, replace=False), v] = False
    return presence


@dataclass
class RunningViewStats:
    """Per-view running presence counts and feature sums over the stream prefix.

    Until :meth:`freeze` is called the statistics grow instance by instance.
    Once frozen (after a full first pass) they hold the global per-view mean
    and presence fraction, which later passes use for filling and weighting.
    """

    count: np.ndarray
    feature_sum: list
    instances_seen: int = 0
    position: int = 0
    frozen: bool = False
    cold_starts: int = 0

    @classmethod
    def empty(cls, dims: Sequence[int]) -> "RunningViewStats":
        return cls(np.zeros(len(dims), dtype=np.int64), [np.zeros(d) for d in dims])

    def mean(self, v: int) -> np.ndarray | None:
        if self.count[v] == 0:
            return None
        return self.feature_sum[v] / self.count[v]

    def freeze(self):
        self.frozen = True

    def rewind(self):
        """Start a new pass over the source."""
        self.position = 0

    def copy(self) -> "RunningViewStats":
        return RunningViewStats(self.count.copy(), [s.copy() for s in self.feature_sum],
                                self.instances_seen, self.position, self.frozen, self.cold_starts)


@dataclass
class ChunkBatch:
    """One chunk of consecutive instances across all views.

    ``X[v]`` holds the filled rows (raw rows where present, imputed rows
    elsewhere); ``weights[:, v]`` holds the diagonal of the weight matrix.
    """

    index: int
    start: int
    X: list
    presence: np.ndarray
    weights: np.ndarray
    sq_norms: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sq_norms:
            self.sq_norms = [np.einsum("ij,ij->i", x, x) for x in self.X]

    @property
    def size(self) -> int:
        return self.presence.shape[0]

    @property
    def n_views(self) -> int:
        return len(self.X)

    def raw(self, v: int) -> np.ndarray:
        """Observed rows of view ``v`` only."""
        return self.X[v][self.presence[:, v]]


def next_chunk(source: MultiViewSource, stats: RunningViewStats, chunk_size: int) -> ChunkBatch | None:
    """Read the next chunk, fill missing rows and set their weights.

    Returns None once the pass is exhausted. ``stats`` is advanced in place
    one instance at a time, so a missing row sees every earlier instance,
    including the earlier rows of its own chunk.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk_size}")
    start = stats.position
    n = source.n_instances
    if start >= n:
        return None
    stop = min(start + chunk_size, n)
    X = source.read(start, stop)
    presence = source.presence[start:stop]
    weights = np.ones((stop - start, source.n_views))
    for v in range(source.n_views):
        p = presence[:, v]
        if stats.frozen:
            _fill_frozen(X[v], p, weights[:, v], stats, v, n)
        else:
            _fill_running(X[v], p, weights[:, v], stats, v, start)
    stats.position = stop
    if not stats.frozen:
        stats.instances_seen = stop
    return ChunkBatch(index=start // chunk_size + 1, start=start, X=X, presence=presence, weights=weights)


def _fill_running(x, p, w, stats, v, start):
    acc = stats.feature_sum[v]
    count = int(stats.count[v])
    for r in range(x.shape[0]):
        if p[r]:
            np.add(acc, x[r], out=acc)
            count += 1
        elif count == 0:
            x[r] = 0.0
            w[r] = COLD_START_WEIGHT
            stats.cold_starts += 1
        else:
            x[r] = acc / count
            w[r] = count / (start + r + 1)
    stats.count[v] = count


def _fill_frozen(x, p, w, stats, v, n):
    missing = ~p
    if not missing.any():
        return
    mean = stats.mean(v)
    if mean is None:
        x[missing] = 0.0
        w[missing] = COLD_START_WEIGHT
        stats.cold_starts += int(missing.sum())
    else:
        x[missing] = mean
        w[missing] = stats.count[v] / n


def iter_chunks(source: MultiViewSource, stats: RunningViewStats, chunk_size: int):
    while (chunk := next_chunk(source, stats, chunk_size)) is not None:
        yield chunk

