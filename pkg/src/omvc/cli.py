"""Command-line driver: ``omvc generate | corrupt | run | evaluate``.

Every command writes machine-readable text outputs; the only binary file is
the run checkpoint. ``OMVC_OUTPUT_DIR`` overrides the output directory of
``run``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DENSE,
    STORAGE_KINDS,
    DatasetError,
    ViewSpec,
    open_dataset,
    read_labels,
    simulate_missing,
    write_indicator,
    write_labels,
    write_manifest,
    write_matrix,
)
from .evaluation import DEFAULT_RESTARTS, score_consensus
from .factorization import NumericalError, SolverConfig
from .pipeline import OnlineRunner
from .synthetic import PlantedModel

log = logging.getLogger("omvc")

OUTPUT_ENV = "OMVC_OUTPUT_DIR"
OUTPUT_FORMAT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.bin"

_SOLVER_FIELDS = tuple(f.name for f in fields(SolverConfig))


@dataclass
class ExperimentConfig:
    manifest: str
    n_components: int
    alpha: float | list = 1e-2
    beta: float | list = 1e-7
    sigma: float = 0.01
    step_decay: float = 0.1
    max_outer: int = 50
    max_inner: int = 10
    newton_steps: int = 5
    tol_outer: float = 1e-4
    tol_inner: float = 1e-6
    hessian_ridge: float = 1e-8
    checked: bool = False
    chunk_size: int = 50
    passes: int = 1
    missing_rate: float = 0.0
    seed: int = 0
    output_dir: str = "omvc-run"
    restarts: int = DEFAULT_RESTARTS
    rescore_history: bool = False

    def __post_init__(self):
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if self.chunk_size < 1 or self.passes < 1 or self.restarts < 1:
            raise ValueError("chunk_size, passes and restarts must be >= 1")
        self.solver()

    def solver(self) -> SolverConfig:
        return SolverConfig(**{k: getattr(self, k) for k in _SOLVER_FIELDS})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    model = PlantedModel(args.clusters, args.per_cluster, tuple(args.dims), args.noise,
                         args.spread, args.seed, args.amplitude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for v, d in enumerate(model.dims):
        path = out / f"view{v}.txt"
        write_matrix(path, model.blocks(v), args.storage)
        specs.append(ViewSpec(v, d, str(path), args.storage, 1.0))
    write_labels(out / "labels.txt", model.labels())
    write_manifest(out / "manifest.json", specs, model.n_instances, labels=str(out / "labels.txt"))
    log.info("wrote %d instances, %d views to %s (separation %.3g)",
             model.n_instances, len(model.dims), out, model.separation())
    return 0


# --------------------------------------------------------------------------- corrupt


def cmd_corrupt(args) -> int:
    source = open_dataset(args.manifest)
    presence = simulate_missing(source, args.rate, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for entry in source.specs:
        dest = out / Path(entry.path).name
        if Path(entry.path).resolve() != dest.resolve():
            shutil.copyfile(entry.path, dest)
        specs.append(ViewSpec(entry.view_id, entry.dim, str(dest), entry.storage, entry.scale))
    labels = None
    if source.labels is not None:
        labels = str(out / "labels.txt")
        write_labels(labels, source.labels)
    write_indicator(out / "indicator.txt", presence)
    write_manifest(out / "manifest.json", specs, source.n_instances, labels=labels,
                   indicator=str(out / "indicator.txt"))
    log.info("missing fraction per view: %s", np.round(1.0 - presence.mean(axis=0), 4).tolist())
    return 0


# --------------------------------------------------------------------------- run


def _load_config(args) -> ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("manifest", "n_components", "alpha", "beta", "chunk_size", "passes", "missing_rate",
                "seed", "output_dir", "restarts", "max_outer", "tol_outer", "checked",
                "rescore_history"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    env = os.environ.get(OUTPUT_ENV)
    if env:
        data["output_dir"] = env
    missing = [k for k in ("manifest", "n_components") if k not in data]
    if missing:
        raise ValueError(f"missing required setting(s): {', '.join(missing)}")
    return ExperimentConfig.from_dict(data)


def _open_run_source(config: ExperimentConfig):
    source = open_dataset(config.manifest)
    if config.missing_rate > 0:
        source = source.with_presence(simulate_missing(source, config.missing_rate, config.seed))
    return source


def write_run_outputs(out: Path, config: ExperimentConfig, runner: OnlineRunner):
    report = runner.report()
    (out / "config.json").write_text(config.to_json())
    with open(out / "loss_trace.jsonl", "w") as fh:
        for p, t, loss in report.loss_trace:
            fh.write(json.dumps({"pass": p, "chunk": t, "loss": loss}) + "\n")
    np.savetxt(out / "consensus.txt", np.asarray(report.consensus), fmt="%.17g")
    flags = dict(report.flags)
    flags.update({"format_version": OUTPUT_FORMAT_VERSION, "package_version": __version__,
                  "finished": runner.finished, "chunks_processed": len(report.loss_trace)})
    (out / "flags.json").write_text(json.dumps(flags, indent=2, sort_keys=True) + "\n")
    # wall times are not reproducible, so they live apart from the other outputs
    with open(out / "timing.jsonl", "w") as fh:
        for (p, t, _), sec, sweeps in zip(report.loss_trace, report.timing, report.sweeps):
            fh.write(json.dumps({"pass": p, "chunk": t, "seconds": sec, "sweeps": sweeps}) + "\n")


def cmd_run(args) -> int:
    config = _load_config(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = _open_run_source(config)
    if args.resume:
        runner = OnlineRunner.from_checkpoint(out / CHECKPOINT_NAME, source, spill_dir=out)
        same = (asdict(runner.config) == asdict(config.solver())
                and (runner.chunk_size, runner.passes, runner.seed, runner.rescore_history)
                == (config.chunk_size, config.passes, config.seed, config.rescore_history))
        if not same:
            raise ValueError("checkpoint was written with a different configuration")
    else:
        runner = OnlineRunner(source, config.solver(), config.chunk_size, config.passes, config.seed,
                              spill_dir=out, rescore_history=config.rescore_history)
    try:
        runner.run(stop_after=args.stop_after_chunk)
        runner.save_checkpoint(out / CHECKPOINT_NAME)
        write_run_outputs(out, config, runner)
    finally:
        runner.store.close()
    log.info("%s after %d chunks; outputs in %s",
             "finished" if runner.finished else "stopped", len(runner.loss_trace), out)
    return 0


# --------------------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    consensus_path = run_dir / "consensus.txt"
    if not consensus_path.exists():
        raise FileNotFoundError(f"{consensus_path} not found; run the experiment first")
    config = ExperimentConfig.load(run_dir / "config.json")
    if args.labels:
        labels = read_labels(args.labels)
    else:
        labels = open_dataset(config.manifest).labels
        if labels is None:
            raise ValueError("dataset has no labels; pass --labels")
    consensus = np.loadtxt(consensus_path, ndmin=2)
    k = args.clusters or config.n_components
    restarts = args.restarts or config.restarts
    score = score_consensus(consensus, labels, k, restarts, args.seed)
    out = score.to_dict()
    out.update({"clusters": k, "seed": args.seed, "format_version": OUTPUT_FORMAT_VERSION})
    dest = Path(args.out) if args.out else run_dir / "score.json"
    dest.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(f"NMI {score.nmi_mean:.4f} +- {score.nmi_std:.4f}  AC {score.ac_mean:.4f} +- {score.ac_std:.4f}")
    return 0


# --------------------------------------------------------------------------- entry point


def _float_or_list(text):
    parts = [float(x) for x in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omvc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a planted multi-view dataset")
    g.add_argument("--clusters", type=int, required=True)
    g.add_argument("--per-cluster", type=int, required=True)
    g.add_argument("--dims", type=int, nargs="+", required=True, help="feature dimension of each view")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--spread", type=float, default=0.1)
    g.add_argument("--amplitude", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--storage", choices=STORAGE_KINDS, default=DENSE)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("corrupt", help="delete instances at random from each view")
    c.add_argument("--manifest", required=True)
    c.add_argument("--rate", type=float, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corrupt)

    r = sub.add_parser("run", help="stream a dataset through the online factorization")
    r.add_argument("--config", help="JSON experiment config; flags override its entries")
    r.add_argument("--manifest")
    r.add_argument("-K", "--n-components", dest="n_components", type=int)
    r.add_argument("--alpha", type=_float_or_list, help="one value or comma-separated per view")
    r.add_argument("--beta", type=_float_or_list, help="one value or comma-separated per view")
    r.add_argument("--chunk-size", type=int)
    r.add_argument("--passes", type=int)
    r.add_argument("--missing-rate", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--max-outer", type=int)
    r.add_argument("--tol-outer", type=float)
    r.add_argument("--checked", action="store_true", default=None)
    r.add_argument("--restarts", type=int)
    r.add_argument("--rescore-history", action="store_true", default=None,
                   help="score past chunks of a pass with the current basis in the average loss")
    r.add_argument("--output-dir")
    r.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
    r.add_argument("--stop-after-chunk", type=int, help="stop (with a checkpoint) after this many chunks")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="cluster a run's consensus and score it")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--labels", help="label file (defaults to the dataset's)")
    e.add_argument("--clusters", type=int, help="K-means clusters (defaults to the run's K)")
    e.add_argument("--restarts", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="score file (defaults to RUN_DIR/score.json)")
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DatasetError, NumericalError, ValueError, OSError) as exc:
        print(f"omvc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
