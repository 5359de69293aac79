"""Corpus ingestion into the preprocessed-trial cache, and loading windows back.

The cache holds one file per (subject, run) with the high-pass filtered
samples of every admissible trial concatenated along time; trial boundaries
and classes live in the file metadata. ``index.json`` records the content hash
of each source EDF together with the preprocessing parameters, so unchanged
inputs are skipped on re-ingestion.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cache import file_sha256, read_tensor, write_tensor
from .dataset import SAMPLE_RATE, WindowSet, windows_from_trials
from .edf import IMAGERY_RUNS, ActionClass, LabeledTrial, MissingDataset, discover_dataset, extract_trials, load_recording
from .preprocess import highpass, resample

log = logging.getLogger(__name__)

INDEX_FILE = "index.json"
CACHE_VERSION = 1


@dataclass
class IngestSummary:
    subjects: list[int] = field(default_factory=list)
    written: int = 0
    skipped: int = 0
    trials: dict[tuple[int, int], int] = field(default_factory=dict)
    excluded_hits: list[int] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"subjects: {len(self.subjects)}", f"files written: {self.written}, unchanged: {self.skipped}"]
        per_subject = Counter()
        for (s, _), n in self.trials.items():
            per_subject[s] += n
        for s in self.subjects:
            runs = " ".join(f"R{r:02d}:{n}" for (ss, r), n in sorted(self.trials.items()) if ss == s)
            out.append(f"S{s:03d} trials {per_subject[s]}  {runs}")
        if self.excluded_hits:
            out.append("excluded subjects present: " + ", ".join(f"S{s:03d}" for s in self.excluded_hits))
        return out


def cache_name(subject: int, run: int) -> str:
    return f"S{subject:03d}R{run:02d}.egm"


def _params(cutoff: float, fs: int) -> dict:
    return {"cache_version": CACHE_VERSION, "highpass_hz": cutoff, "filter_order": 4, "sample_rate": fs}


def preprocess_file(path: Path, cutoff: float = 1.0, fs: int = SAMPLE_RATE) -> tuple[np.ndarray, dict]:
    """Parse, resample to ``fs``, high-pass and cut trials of one EDF file."""
    rec = load_recording(path)
    source_fs = rec.sample_rate
    rec.samples = highpass(resample(rec.samples, source_fs, fs), fs, cutoff)
    rec.sample_rate = float(fs)
    trials = extract_trials(rec)
    data = np.concatenate([t.signal for t in trials]) if trials else np.zeros((0, 64))
    meta = {
        "subject": rec.subject_id,
        "run": rec.run_id,
        "sample_rate": fs,
        "source_sample_rate": source_fs,
        "trials": [{"label": int(t.label), "onset": t.onset, "length": int(t.signal.shape[0])} for t in trials],
        "electrodes": rec.electrode_labels,
    }
    return data, meta


def _ingest_one(args):
    path, out, cutoff, fs, params = args
    data, meta = preprocess_file(path, cutoff, fs)
    meta["params"] = params
    write_tensor(out, data, meta)
    return meta["subject"], meta["run"], len(meta["trials"])


def ingest(dataset_root, cache_dir, cutoff: float = 1.0, fs: int = SAMPLE_RATE,
           runs: Sequence[int] = IMAGERY_RUNS, exclusions: Iterable[int] = (), workers: int = 1,
           subjects: Sequence[int] | None = None) -> IngestSummary:
    """Parse every corpus file and cache the filtered trials of the imagery runs.

    Every discovered file is parsed (so malformed inputs surface here); only
    runs in ``runs`` are written to the cache. ``subjects`` restricts the
    work to those subject ids.
    """
    files = discover_dataset(dataset_root)
    if subjects is not None:
        files = {k: v for k, v in files.items() if k[0] in set(subjects)}
        if not files:
            raise MissingDataset(f"none of subjects {sorted(subjects)} found under {dataset_root}")
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index_path = cache_dir / INDEX_FILE
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    params = _params(cutoff, fs)

    summary = IngestSummary(subjects=sorted({s for s, _ in files}))
    summary.excluded_hits = sorted(set(exclusions) & set(summary.subjects))
    jobs = []
    for (subject, run), path in sorted(files.items()):
        if run not in runs:
            load_recording(path)  # validate
            continue
        name = cache_name(subject, run)
        digest = file_sha256(path)
        entry = index.get(name)
        if entry and entry["sha256"] == digest and entry["params"] == params and (cache_dir / name).exists():
            summary.skipped += 1
            summary.trials[(subject, run)] = entry["trials"]
            continue
        jobs.append(((path, cache_dir / name, cutoff, fs, params), name, digest))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_ingest_one, [j[0] for j in jobs]))
    else:
        results = [_ingest_one(j[0]) for j in jobs]
    for (_, name, digest), (subject, run, n) in zip(jobs, results):
        index[name] = {"sha256": digest, "params": params, "trials": n}
        summary.trials[(subject, run)] = n
        summary.written += 1
    if jobs or not index_path.exists():
        index_path.write_text(json.dumps(index, sort_keys=True, indent=1))
    return summary


def cached_subjects(cache_dir) -> list[int]:
    index = json.loads((Path(cache_dir) / INDEX_FILE).read_text())
    return sorted({int(name[1:4]) for name in index})


def load_trials(cache_dir, subjects: Sequence[int] | None = None,
                runs: Sequence[int] = IMAGERY_RUNS) -> list[LabeledTrial]:
    cache_dir = Path(cache_dir)
    index_path = cache_dir / INDEX_FILE
    if not index_path.exists():
        raise FileNotFoundError(f"no trial cache in {cache_dir}; run ingest first")
    index = json.loads(index_path.read_text())
    wanted = None if subjects is None else set(subjects)
    trials = []
    for name in sorted(index):
        subject, run = int(name[1:4]), int(name[5:7])
        if (wanted is not None and subject not in wanted) or run not in runs:
            continue
        data, meta = read_tensor(cache_dir / name)
        pos = 0
        for t in meta["trials"]:
            sig = data[pos : pos + t["length"]]
            pos += t["length"]
            trials.append(LabeledTrial(subject, run, ActionClass(t["label"]), sig, t["onset"]))
    return trials


def load_windows(cache_dir, window_samples: int, subjects: Sequence[int] | None = None) -> WindowSet:
    return windows_from_trials(load_trials(cache_dir, subjects), window_samples)
