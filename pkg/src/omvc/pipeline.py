"""One-pass and multi-pass drivers over a streaming multi-view source."""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import MultiViewSource, RunningViewStats, next_chunk
from .factorization import (
    FactorState,
    NumericalError,
    PassLoss,
    SolverConfig,
    accumulate,
    average_loss,
    chunk_alternation,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OMVCCKPT"
CHECKPOINT_VERSION = 1
DEFAULT_CONSENSUS_BUDGET = 256 * 2**20


@dataclass
class RunReport:
    loss_trace: list
    consensus: np.ndarray
    timing: list = field(default_factory=list)
    sweeps: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def end_of_pass_losses(self) -> list:
        last = {}
        for p, _t, loss in self.loss_trace:
            last[p] = loss
        return [last[p] for p in sorted(last)]

    def pass_trace(self, p: int) -> list:
        return [loss for q, _t, loss in self.loss_trace if q == p]


class ConsensusStore:
    """All ``N`` consensus rows, in memory or in a temporary file past the byte budget."""

    def __init__(self, n_instances: int, n_components: int, budget: int = DEFAULT_CONSENSUS_BUDGET,
                 spill_dir=None):
        shape = (n_instances, n_components)
        self.spilled = n_instances * n_components * 8 > budget
        self.path = None
        if self.spilled:
            fd, path = tempfile.mkstemp(prefix="omvc-consensus-", suffix=".f64", dir=spill_dir)
            os.close(fd)
            self.path = path
            self.rows = np.memmap(path, dtype=np.float64, mode="w+", shape=shape)
        else:
            self.rows = np.zeros(shape)

    def write(self, start: int, block: np.ndarray):
        self.rows[start:start + block.shape[0]] = block

    def close(self):
        if self.path is not None:
            del self.rows
            try:
                os.unlink(self.path)
            except OSError:
                pass
            self.path = None


def working_set_bytes(dims, chunk_size: int, n_components: int) -> int:
    """Bytes for one chunk's data and factors: per view the chunk rows, ``U``,
    ``B``, ``A``, ``V`` and its gradient, plus the chunk consensus."""
    s, k = int(chunk_size), int(n_components)
    per_view = sum(s * d + 2 * d * k + k * k + 2 * s * k for d in dims)
    return 8 * (per_view + s * k)


class OnlineRunner:
    """Streams a source chunk by chunk, pass by pass.

    Randomness (the initial factors) comes from one generator seeded with
    ``seed``; given the source, configuration and seed, a run is deterministic.

    The average loss sums, over the chunks of the current pass, the loss each
    chunk had when it finished. With ``rescore_history`` those chunks are
    instead re-scored with the current basis, exactly and without re-reading
    data, through per-pass sufficient statistics.
    """

    def __init__(self, source: MultiViewSource, config: SolverConfig, chunk_size: int = 50,
                 passes: int = 1, seed: int = 0, consensus_budget: int = DEFAULT_CONSENSUS_BUDGET,
                 spill_dir=None, monitor=None, rescore_history: bool = False):
        if passes < 1:
            raise ValueError(f"passes must be >= 1, got {passes}")
        if chunk_size < 1:
            raise ValueError(f"chunk size must be >= 1, got {chunk_size}")
        self.source = source
        self.config = config
        self.chunk_size = int(chunk_size)
        self.passes = int(passes)
        self.seed = seed
        self.monitor = monitor
        self.rescore_history = bool(rescore_history)
        self.rng = np.random.default_rng(seed)
        self.state = FactorState.empty(source.dims, config.n_components)
        self.store = ConsensusStore(source.n_instances, config.n_components, consensus_budget, spill_dir)
        self.pass_loss = PassLoss.empty(source.dims, config.n_components)
        self.loss_trace = []
        self.timing = []
        self.sweeps = []
        self.exhausted = 0
        self.finished = False
        self.last_factors = None
        self.last_chunk = None

    @property
    def chunks_per_pass(self) -> int:
        return -(-self.source.n_instances // self.chunk_size)

    def step(self) -> bool:
        """Process one chunk; returns False once every pass is complete."""
        if self.finished:
            return False
        state = self.state
        chunk = next_chunk(self.source, state.stats, self.chunk_size)
        if chunk is None:
            if state.pass_index >= self.passes:
                self.finished = True
                return False
            state.stats.freeze()
            state.stats.rewind()
            state.pass_index += 1
            self.pass_loss = PassLoss.empty(self.source.dims, self.config.n_components)
            chunk = next_chunk(self.source, state.stats, self.chunk_size)
        tic = time.perf_counter()
        try:
            factors = chunk_alternation(chunk, state, self.config, self.rng, self.monitor)
        except NumericalError as exc:
            raise NumericalError(f"pass {state.pass_index}, chunk {chunk.index}: {exc}") from None
        accumulate(state, chunk, factors)
        self.store.write(chunk.start, factors.Vstar)
        self.timing.append(time.perf_counter() - tic)
        self.sweeps.append(factors.sweeps)
        self.exhausted += factors.exhausted
        self.pass_loss.add(chunk, factors, self.config)
        total = self.pass_loss.total(state.U) if self.rescore_history else self.pass_loss.recorded
        loss = average_loss(total, self.pass_loss.chunks, self.chunk_size, self.source.n_instances)
        self.loss_trace.append((state.pass_index, chunk.index, loss))
        self.last_factors, self.last_chunk = factors, chunk
        log.debug("pass %d chunk %d: %d sweeps, average loss %.6g",
                  state.pass_index, chunk.index, factors.sweeps, loss)
        if state.stats.position >= self.source.n_instances and state.pass_index >= self.passes:
            self.finished = True
        return True

    def run(self, stop_after: int | None = None) -> RunReport:
        """Run to completion, or until ``stop_after`` more chunks have been processed."""
        done = 0
        while (stop_after is None or done < stop_after) and self.step():
            done += 1
        return self.report()

    def report(self) -> RunReport:
        return RunReport(
            loss_trace=list(self.loss_trace),
            consensus=self.store.rows,
            timing=list(self.timing),
            sweeps=list(self.sweeps),
            flags={"line_search_exhausted": self.exhausted,
                   "cold_starts": self.state.stats.cold_starts},
        )

    # ------------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path):
        """Write a versioned flat binary record of the complete run state."""
        st = self.state
        arrays = {}
        for v in range(st.n_views):
            if st.U[v] is not None:
                arrays[f"U{v}"] = st.U[v]
            arrays[f"A{v}"] = st.A[v]
            arrays[f"B{v}"] = st.B[v]
            arrays[f"sum{v}"] = st.stats.feature_sum[v]
        arrays["count"] = st.stats.count
        arrays["consensus"] = np.asarray(self.store.rows)
        for v in range(st.n_views):
            arrays[f"pass_A{v}"] = self.pass_loss.A[v]
            arrays[f"pass_B{v}"] = self.pass_loss.B[v]
        arrays["loss_trace"] = np.asarray(self.loss_trace, dtype=np.float64).reshape(-1, 3)
        arrays["sweeps"] = np.asarray(self.sweeps, dtype=np.int64)
        arrays["timing"] = np.asarray(self.timing, dtype=np.float64)
        header = {
            "config": _config_to_json(self.config),
            "chunk_size": self.chunk_size,
            "passes": self.passes,
            "seed": self.seed,
            "n_instances": self.source.n_instances,
            "dims": list(self.source.dims),
            "C": [float(c) for c in st.C],
            "pass_loss": {"C": [float(c) for c in self.pass_loss.C],
                          "penalty": self.pass_loss.penalty, "chunks": self.pass_loss.chunks,
                          "recorded": self.pass_loss.recorded},
            "rescore_history": self.rescore_history,
            "pass_index": st.pass_index,
            "last_chunk": list(st.last_chunk),
            "stats": {"instances_seen": st.stats.instances_seen, "position": st.stats.position,
                      "frozen": st.stats.frozen, "cold_starts": st.stats.cold_starts},
            "rng": self.rng.bit_generator.state,
            "exhausted": self.exhausted,
            "finished": self.finished,
        }
        write_record(path, header, arrays)

    @classmethod
    def from_checkpoint(cls, path, source: MultiViewSource, consensus_budget: int = DEFAULT_CONSENSUS_BUDGET,
                        spill_dir=None, monitor=None) -> "OnlineRunner":
        header, arrays = read_record(path)
        if header["n_instances"] != source.n_instances or tuple(header["dims"]) != source.dims:
            raise ValueError("checkpoint does not match the source's shape")
        config = SolverConfig(**header["config"])
        runner = cls(source, config, header["chunk_size"], header["passes"], header["seed"],
                     consensus_budget, spill_dir, monitor, header["rescore_history"])
        st = runner.state
        n_views = len(header["dims"])
        st.U = [arrays.get(f"U{v}") for v in range(n_views)]
        st.A = [arrays[f"A{v}"] for v in range(n_views)]
        st.B = [arrays[f"B{v}"] for v in range(n_views)]
        st.C = list(header["C"])
        st.pass_index = header["pass_index"]
        st.last_chunk = tuple(header["last_chunk"])
        s = header["stats"]
        st.stats = RunningViewStats(arrays["count"], [arrays[f"sum{v}"] for v in range(n_views)],
                                    s["instances_seen"], s["position"], s["frozen"], s["cold_starts"])
        runner.rng.bit_generator.state = header["rng"]
        runner.store.write(0, arrays["consensus"])
        pl = header["pass_loss"]
        runner.pass_loss = PassLoss([arrays[f"pass_A{v}"] for v in range(n_views)],
                                    [arrays[f"pass_B{v}"] for v in range(n_views)],
                                    list(pl["C"]), pl["penalty"], pl["chunks"], pl["recorded"])
        runner.loss_trace = [(int(p), int(t), float(x)) for p, t, x in arrays["loss_trace"]]
        runner.sweeps = arrays["sweeps"].tolist()
        runner.timing = arrays["timing"].tolist()
        runner.exhausted = header["exhausted"]
        runner.finished = header["finished"]
        return runner


def _config_to_json(config: SolverConfig) -> dict:
    out = asdict(config)
    for key in ("alpha", "beta"):
        if not np.isscalar(out[key]):
            out[key] = [float(x) for x in out[key]]
    return out


def write_record(path, header: dict, arrays: dict):
    """``MAGIC | version u32 | header length u64 | JSON header | raw little-endian arrays``."""
    layout, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        data = arr.astype(dtype, copy=False).tobytes()
        layout.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    meta = json.dumps({"header": header, "arrays": layout}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_record(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        try:
            version, meta_len = struct.unpack("<IQ", fh.read(12))
        except struct.error:
            raise ValueError(f"{path}: truncated checkpoint header") from None
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len))
        payload = fh.read()
    arrays = {}
    for item in meta["arrays"]:
        if item["offset"] + item["nbytes"] > len(payload):
            raise ValueError(f"{path}: truncated checkpoint payload")
        buf = payload[item["offset"]:item["offset"] + item["nbytes"]]
        arrays[item["name"]] = np.frombuffer(buf, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()
    return meta["header"], arrays


def run_one_pass(source: MultiViewSource, config: SolverConfig, seed: int = 0, chunk_size: int = 50,
                 **kwargs):
    """One streaming pass; returns ``(FactorState, RunReport)``."""
    runner = OnlineRunner(source, config, chunk_size=chunk_size, passes=1, seed=seed, **kwargs)
    report = runner.run()
    return runner.state, report


def run_multi_pass(source: MultiViewSource, config: SolverConfig, seed: int = 0, passes: int = 1,
                   chunk_size: int = 50, **kwargs):
    """``passes`` sweeps reusing ``U``, ``A`` and ``B``; later passes fill and weight
    missing rows from the global statistics collected in pass 1."""
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    runner = OnlineRunner(source, config, chunk_size=chunk_size, passes=passes, seed=seed, **kwargs)
    report = runner.run()
    return runner.state, report
