"""Command-line entry point: ``eegmesh {ingest,train,verify,report}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 compute failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import biometrics, corpus, reporting, training
from .cache import CacheFormatError
from .dataset import fit_standardizer
from .edf import DATASET_ENV, DEFAULT_EXCLUSIONS, EdfError, InvalidRun, MissingDataset, UnknownSubject
from .montage import SUBSETS
from .nn.checkpoint import CheckpointError, load_checkpoint

log = logging.getLogger("eegmesh")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_COMPUTE = 0, 1, 2, 3
WINDOWS = (0.25, 0.5, 1.0)
TASKS = ("action", "identity", "verify")
SCOPES = ("inter", "intra")
LOCK_NAME = ".eegmesh.lock"


class InvalidManifest(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


class OutputLocked(RuntimeError):
    pass


@dataclass
class ExperimentManifest:
    out: str
    task: str = "action"
    scope: str = "inter"
    name: str = ""
    window_seconds: float = 1.0
    phase_count: int = 4
    subset: str = "Full"
    exclusions: list[int] | None = None  # None: the default exclusion list
    subjects: list[int] | None = None  # None: every cached subject
    seed: int = 0
    cache: str | None = None  # defaults to <out>/cache
    # split settings
    folds: int = 10
    fold_indices: list[int] | None = None  # 1-based; None runs every fold
    users: list[int] | None = None  # intra-subject users; None for subjects 1-20 minus exclusions
    fractions: list[float] = field(default_factory=lambda: list(training.DEFAULT_ID_FRACTIONS))
    # verification
    scenario: str = "GI-KU"
    n_unknown: int = biometrics.N_UNKNOWN_USERS
    checkpoint: str | None = None
    # training overrides
    epochs: int = 80
    learning_rate: float = 1e-4
    batch_size: int = 32
    widths: list[int] = field(default_factory=lambda: list(training.TABLE1_WIDTHS))
    dense_units: int = 1024
    hidden: int = 128
    zscore: str = "corpus"

    def validate(self) -> None:
        if self.task not in TASKS:
            raise InvalidManifest(f"task must be one of {TASKS}, got {self.task!r}")
        if self.scope not in SCOPES:
            raise InvalidManifest(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.window_seconds not in WINDOWS:
            raise InvalidManifest(f"window must be one of {WINDOWS} seconds, got {self.window_seconds}")
        if self.phase_count <= 0:
            raise InvalidManifest("phase count must be positive")
        samples = round(self.window_seconds * corpus.SAMPLE_RATE)
        if samples % self.phase_count:
            raise InvalidManifest(f"{samples}-sample window is not divisible by {self.phase_count} phases")
        if self.subset not in SUBSETS:
            raise InvalidManifest(f"subset must be one of {sorted(SUBSETS)}, got {self.subset!r}")
        if self.scenario not in biometrics.SCENARIOS:
            raise InvalidManifest(f"scenario must be one of {biometrics.SCENARIOS}")
        if len(self.fractions) != 3 or min(self.fractions) < 0 or sum(self.fractions) <= 0:
            raise InvalidManifest("fractions must be three non-negative numbers")
        if self.folds < 2:
            raise InvalidManifest("need at least two folds")
        try:
            self.train_config()
        except ValueError as e:
            raise InvalidManifest(str(e)) from e

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            seed=self.seed, window_seconds=self.window_seconds, phase_count=self.phase_count,
            widths=tuple(self.widths), dense_units=self.dense_units, hidden=self.hidden,
            zscore=self.zscore, subset=self.subset,
        )

    @property
    def cache_dir(self) -> Path:
        return Path(self.cache) if self.cache else Path(self.out) / "cache"

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        kind = {"action": f"action-{self.scope}", "identity": "identity"}.get(self.task, f"verify-{self.scenario}")
        return f"{kind}-{self.subset}-w{self.window_seconds:g}-s{self.seed}"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidManifest(f"unknown manifest keys: {sorted(extra)}")
        if "out" not in d:
            raise InvalidManifest("manifest needs an output directory")
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidManifest(str(e)) from e


# --------------------------------------------------------------------------
# Output helpers


def _f(x) -> str:
    return f"{x:.6f}"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f"{out} is in use by another invocation (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _select_windows(m: ExperimentManifest):
    cache = m.cache_dir
    if not (cache / corpus.INDEX_FILE).exists():
        raise MissingDataset(f"no trial cache at {cache}; run 'eegmesh ingest' first")
    available = corpus.cached_subjects(cache)
    if m.exclusions is None:
        exclusions = [s for s in DEFAULT_EXCLUSIONS if s in available]
    else:
        exclusions = m.exclusions
    subjects = [s for s in available if s not in set(exclusions)]
    missing = set(exclusions) - set(available)
    if missing:
        raise UnknownSubject(f"excluded subjects not in cache: {sorted(missing)}")
    if m.subjects is not None:
        unknown = set(m.subjects) - set(subjects)
        if unknown:
            raise UnknownSubject(f"requested subjects not available: {sorted(unknown)}")
        subjects = sorted(m.subjects)
    cfg = m.train_config()
    return corpus.load_windows(cache, cfg.window_samples, subjects), cfg


# --------------------------------------------------------------------------
# Commands


def cmd_ingest(dataset_root, out, exclusions=(), workers: int = 1) -> corpus.IngestSummary:
    root = dataset_root or os.environ.get(DATASET_ENV)
    if not root:
        raise MissingDataset(f"no dataset root given and {DATASET_ENV} is unset")
    out = Path(out)
    with output_lock(out):
        summary = corpus.ingest(root, out / "cache", exclusions=exclusions, workers=workers)
    for line in summary.lines():
        print(line)
    return summary


def cmd_train(m: ExperimentManifest) -> Path:
    m.validate()
    out = Path(m.out)
    with output_lock(out):
        ws, cfg = _select_windows(m)
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        _write_json(out / "manifest.json", asdict(m))
        if m.task == "action":
            if m.scope == "inter":
                folds = None if m.fold_indices is None else [i - 1 for i in m.fold_indices]
                outcomes = training.run_inter_subject(ws, cfg, m.folds, folds, checkpoint_dir=ckpt_dir)
            else:
                users = m.users if m.users is not None else [s for s in ws.subject_list() if s <= 20]
                outcomes = training.run_intra_subject(ws, cfg, users, checkpoint_dir=ckpt_dir)
            ckpts = [ckpt_dir / f"{o.name}.ckpt" for o in outcomes]
            n_classes, n_users = training.N_ACTION_CLASSES, len(ws.subject_list())
        elif m.task == "identity":
            res = training.run_identification(ws, cfg, tuple(m.fractions), ckpt_dir / "identification.ckpt")
            outcomes, ckpts = [res.outcome], [ckpt_dir / "identification.ckpt"]
            n_classes = n_users = len(res.subject_order)
        else:
            raise InvalidManifest("task 'verify' runs through the verify command")

        rows = [[o.name, _f(o.metrics.accuracy), _f(o.metrics.precision), _f(o.metrics.recall),
                 o.n_train_windows, o.n_test_windows] for o in outcomes]
        acc = float(np.mean([o.metrics.accuracy for o in outcomes]))
        prec = float(np.mean([o.metrics.precision for o in outcomes]))
        rec = float(np.mean([o.metrics.recall for o in outcomes]))
        if len(outcomes) > 1:
            rows.append(["mean", _f(acc), _f(prec), _f(rec), "", ""])
        _write_csv(out / "metrics.csv", ["row", "accuracy", "precision", "recall", "n_train", "n_test"], rows)
        curves = []
        for o in outcomes:
            r = o.train_result
            for e, loss in enumerate(r.loss_curve):
                va = r.val_accuracy[e] if e < len(r.val_accuracy) else None
                curves.append([o.name, e + 1, _f(loss), "" if va is None else _f(va)])
        _write_csv(out / "loss_curves.csv", ["row", "epoch", "loss", "val_accuracy"], curves)
        _write_csv(out / "checkpoints.csv", ["row", "path"],
                   [[o.name, str(p.relative_to(out))] for o, p in zip(outcomes, ckpts)])
        _write_json(out / "summary_train.json", [{
            "name": m.label, "task": m.task, "scope": m.scope, "subset": m.subset,
            "window_seconds": m.window_seconds, "seed": m.seed, "accuracy": round(acc, 6),
            "precision": round(prec, 6), "recall": round(rec, 6), "n_classes": n_classes, "n_users": n_users,
        }])
    print(f"{m.label}: accuracy {acc:.4f} over {len(outcomes)} run(s); results in {out}")
    return out / "metrics.csv"


def _verify_from_checkpoint(m: ExperimentManifest, ws, cfg) -> biometrics.ScenarioResult:
    """Known-user verification with an already trained identification model."""
    ckpt = load_checkpoint(m.checkpoint)
    order = ckpt.extra.get("subject_order")
    if ckpt.model.task != "identification" or order is None:
        raise biometrics.WrongModelKind(f"{m.checkpoint} is not an identification checkpoint")
    pool = ws.where(np.isin(ws.subjects, order))
    if pool.subject_list() != sorted(order):
        raise biometrics.ScenarioDataMissing("cache does not hold every subject of the checkpoint")
    tr, _, te = training.split_identification(pool.subjects, tuple(m.fractions), cfg.seed)
    stats = fit_standardizer(pool.take(tr)) if cfg.zscore == "corpus" else None
    embs = biometrics.embed_windows(ckpt.model, pool.take(te), stats, cfg)
    report = biometrics.roc_and_eer(biometrics.distance_matrix(embs), m.scenario, "all")
    return biometrics.ScenarioResult(m.scenario, [report], order, order, [float("nan")])


def cmd_verify(m: ExperimentManifest) -> Path:
    m.validate()
    out = Path(m.out)
    if m.checkpoint is not None:
        if not Path(m.checkpoint).is_file():
            raise MissingCheckpoint(f"checkpoint {m.checkpoint} does not exist")
        if m.scenario != "GI-KU":
            raise InvalidManifest("a stored checkpoint can only serve the GI-KU scenario")
    with output_lock(out):
        ws, cfg = _select_windows(m)
        _write_json(out / "manifest.json", asdict(m))
        if m.checkpoint is not None:
            result = _verify_from_checkpoint(m, ws, cfg)
        else:
            ckpt_dir = out / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            result = biometrics.run_scenario(m.scenario, ws, cfg, tuple(m.fractions), m.n_unknown,
                                             checkpoint_dir=ckpt_dir)
        rows = []
        for r, acc in zip(result.reports, result.identification_accuracy):
            rows.append([r.gesture, _f(r.eer), _f(r.threshold), r.n_genuine, r.n_impostor, _f(r.rank1),
                         "" if np.isnan(acc) else _f(acc)])
            _write_csv(out / f"roc_{m.scenario}_{r.gesture}.csv", ["threshold", "far", "frr"],
                       [[_f(t), _f(a), _f(b)] for t, a, b in r.roc])
        if len(result.reports) > 1:
            rows.append(["mean", _f(result.mean_eer), "", "", "", "", ""])
        path = out / f"verification_{m.scenario}.csv"
        _write_csv(path, ["gesture", "eer", "threshold", "n_genuine", "n_impostor", "rank1", "id_accuracy"], rows)
        _write_json(out / f"summary_verify_{m.scenario}.json", [{
            "name": m.label, "task": "verify", "scenario": m.scenario, "subset": m.subset,
            "window_seconds": m.window_seconds, "seed": m.seed, "eer": round(result.mean_eer, 6),
            "n_users": len(result.verify_subjects),
        }])
    print(f"{m.scenario}: EER {result.mean_eer:.4f} over {len(result.reports)} model(s); results in {out}")
    return path


def cmd_report(results_dir, out=None) -> dict:
    written = reporting.write_report(results_dir, out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return written


# --------------------------------------------------------------------------
# Argument parsing


def _int_list(text: str) -> list[int]:
    """Parse "1,2,5-8" into [1, 2, 5, 6, 7, 8]."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            values.extend(range(int(a), int(b) + 1))
        else:
            values.append(int(part))
    return values


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment manifest; flags override its values")
    p.add_argument("--out", help="output directory")
    p.add_argument("--cache", help="trial cache directory (default <out>/cache)")
    p.add_argument("--task", choices=TASKS[:2])
    p.add_argument("--scope", choices=SCOPES)
    p.add_argument("--window", type=float, dest="window_seconds", help="window length in seconds")
    p.add_argument("--phases", type=int, dest="phase_count", help="phased-subsampling factor")
    p.add_argument("--subset", choices=sorted(SUBSETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--exclude", type=_int_list, dest="exclusions", help="subject ids to drop, e.g. 38,88-89")
    p.add_argument("--subjects", type=_int_list, help="restrict to these subject ids")
    p.add_argument("--folds", type=int, help="number of cross-validation folds")
    p.add_argument("--fold-indices", type=_int_list, help="run only these 1-based folds")
    p.add_argument("--users", type=_int_list, help="intra-subject users")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--widths", type=_int_list, help="convolution widths, e.g. 32,64,128,256")
    p.add_argument("--dense-units", type=int)
    p.add_argument("--hidden", type=int, help="LSTM units per direction")
    p.add_argument("--zscore", choices=("corpus", "segment"))
    p.add_argument("--name", help="experiment label in reports")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eegmesh", description="Motor-imagery EEG mesh CNN + Bi-LSTM experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="parse the corpus and build the trial cache")
    p.add_argument("--dataset-root", help=f"corpus root (default ${DATASET_ENV})")
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", type=_int_list, default=None, help="subjects to flag as excluded")
    p.add_argument("--workers", type=int, default=1)

    _experiment_args(sub.add_parser("train", help="train and evaluate a classifier"))

    p = sub.add_parser("verify", help="verification EER for one scenario")
    _experiment_args(p)
    p.add_argument("--scenario", choices=biometrics.SCENARIOS)
    p.add_argument("--n-unknown", type=int)
    p.add_argument("--checkpoint", help="identification checkpoint to reuse (GI-KU only)")

    p = sub.add_parser("report", help="consolidate results into tables")
    p.add_argument("results", help="directory holding experiment outputs")
    p.add_argument("--out", help="where the report/ folder goes (default: the results directory)")
    return ap


def manifest_from_args(args: argparse.Namespace) -> ExperimentManifest:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidManifest(f"cannot read manifest {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise InvalidManifest("manifest must be a JSON object")
    skip = {"verb", "verbose", "config"}
    for key, value in vars(args).items():
        if key not in skip and value is not None:
            data[key] = value
    if args.verb == "verify":
        data["task"] = "verify"
    m = ExperimentManifest.from_dict(data)
    m.validate()
    return m


_DATA_ERRORS = (
    MissingDataset, EdfError, InvalidRun, UnknownSubject, CacheFormatError, CheckpointError,
    MissingCheckpoint, reporting.NoResults, biometrics.ScenarioDataMissing, biometrics.WrongModelKind,
    biometrics.DegeneratePairs, training.InsufficientData, training.TooFewExamples, training.EmptyTestSet,
    training.SubjectMissingFromTrain, FileNotFoundError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.verb == "ingest":
            cmd_ingest(args.dataset_root, args.out, args.exclude or (), args.workers)
        elif args.verb == "report":
            cmd_report(args.results, args.out)
        else:
            m = manifest_from_args(args)
            (cmd_train if args.verb == "train" else cmd_verify)(m)
    except (InvalidManifest, OutputLocked) as e:
        print(f"eegmesh: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as e:
        print(f"eegmesh: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (training.DivergenceDetected, ArithmeticError, MemoryError, AssertionError) as e:
        print(f"eegmesh: compute failure: {e}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
