"""Window collections and mini-batch assembly for training.

Windows are kept as raw (filtered, not yet standardised) arrays so that
z-score statistics can be fitted on whichever partition a protocol trains on.
Each window expands into ``phase_count`` examples at batch time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .edf import ActionClass, LabeledTrial
from .montage import DEFAULT_LAYOUT, ElectrodeLayout, SubsetConfig
from .preprocess import (
    ZScoreStats,
    mesh_array,
    phase_indices,
    subset_mask,
    zscore_apply,
    zscore_fit,
    zscore_per_segment,
)

SAMPLE_RATE = 160


def window_id(subject: int, run: int, k: int) -> int:
    return subject * 10_000_000 + run * 100_000 + k


@dataclass(eq=False)
class WindowSet:
    windows: np.ndarray  # [n, M, 64]
    subjects: np.ndarray
    runs: np.ndarray
    labels: np.ndarray  # ActionClass values
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def window_samples(self) -> int:
        return self.windows.shape[1]

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.intp)
        return WindowSet(self.windows[idx], self.subjects[idx], self.runs[idx], self.labels[idx], self.ids[idx])

    def where(self, mask) -> "WindowSet":
        return self.take(np.flatnonzero(mask))

    def subject_list(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subjects))

    def class_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    @staticmethod
    def concat(parts: Sequence["WindowSet"]) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("no windows")
        return WindowSet(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                           ("windows", "subjects", "runs", "labels", "ids")))


def windows_from_trials(trials: Iterable[LabeledTrial], window_samples: int) -> WindowSet:
    """Cut every trial into non-overlapping windows (remainders dropped)."""
    chunks, subj, runs, labels, ids = [], [], [], [], []
    counter: dict[tuple[int, int], int] = {}
    for trial in trials:
        n = trial.signal.shape[0] // window_samples
        if n == 0:
            continue
        w = trial.signal[: n * window_samples].reshape(n, window_samples, -1)
        chunks.append(w.astype(np.float32))
        key = (trial.subject_id, trial.run_id)
        start = counter.get(key, 0)
        counter[key] = start + n
        subj += [trial.subject_id] * n
        runs += [trial.run_id] * n
        labels += [int(trial.label)] * n
        ids += [window_id(trial.subject_id, trial.run_id, start + k) for k in range(n)]
    if not chunks:
        return WindowSet(np.zeros((0, window_samples, 64), np.float32), *(np.zeros(0, np.int64) for _ in range(4)))
    return WindowSet(
        np.concatenate(chunks),
        np.asarray(subj, np.int64),
        np.asarray(runs, np.int64),
        np.asarray(labels, np.int64),
        np.asarray(ids, np.int64),
    )


def balance_rest(ws: WindowSet, seed: int) -> WindowSet:
    """Downsample the rest class to the median per-class window count."""
    counts = ws.class_counts()
    rest = int(ActionClass.RestClosedEyes)
    if rest not in counts or len(counts) < 2:
        return ws
    target = int(np.median(list(counts.values())))
    rest_idx = np.flatnonzero(ws.labels == rest)
    if len(rest_idx) <= target:
        return ws
    rng = np.random.default_rng([seed, 17])
    keep = np.sort(rng.choice(rest_idx, size=target, replace=False))
    return ws.take(np.sort(np.concatenate([np.flatnonzero(ws.labels != rest), keep])))


def duplicate_windows(a: WindowSet, b: WindowSet) -> int:
    """Count windows of ``b`` whose content also appears in ``a``."""
    seen = {w.tobytes() for w in a.windows}
    return sum(w.tobytes() in seen for w in b.windows)


class LeakageError(AssertionError):
    pass


def assert_disjoint(train: WindowSet, test: WindowSet, check_content: bool = True) -> None:
    shared = np.intersect1d(train.ids, test.ids)
    if len(shared):
        raise LeakageError(f"{len(shared)} window ids shared between train and test")
    if check_content:
        dup = duplicate_windows(train, test)
        if dup:
            raise LeakageError(f"{dup} test windows duplicate training windows")


@dataclass(eq=False)
class MeshFeeder:
    """Turns standardised windows into mesh-sequence batches.

    Example ``e`` is window ``e // phase_count`` at sampling phase
    ``e % phase_count``.
    """

    windows: np.ndarray  # standardised, [n, M, 64] float32
    targets: np.ndarray
    ids: np.ndarray
    phase_count: int
    mask: np.ndarray | None = None  # [10, 11, 1] bool
    layout: ElectrodeLayout = DEFAULT_LAYOUT

    def __post_init__(self):
        self._phases = phase_indices(self.windows.shape[1], self.phase_count)

    def __len__(self) -> int:
        return len(self.windows) * self.phase_count

    @property
    def time_steps(self) -> int:
        return self._phases.shape[1]

    def example_window(self, examples: np.ndarray) -> np.ndarray:
        return np.asarray(examples) // self.phase_count

    def batch(self, examples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        examples = np.asarray(examples, dtype=np.intp)
        win = examples // self.phase_count
        ph = examples % self.phase_count
        seq = self.windows[win[:, None], self._phases[ph]]  # [B, T, 64]
        x = mesh_array(seq, self.layout)
        if self.mask is not None:
            x *= self.mask
        return x, self.targets[win]

    def window_batch(self, windows: np.ndarray) -> np.ndarray:
        """All phases of the given windows: [B, N, T, 10, 11, 1]."""
        seq = self.windows[np.asarray(windows)][:, self._phases]  # [B, N, T, 64]
        x = mesh_array(seq, self.layout)
        if self.mask is not None:
            x *= self.mask
        return x


def fit_standardizer(train: WindowSet) -> ZScoreStats:
    return zscore_fit(train.windows, fitted_on=train.ids.tolist())


def standardize(ws: WindowSet, stats: ZScoreStats | None) -> np.ndarray:
    """Corpus-level z-score with ``stats``; per-window when ``stats`` is None."""
    if stats is None:
        return zscore_per_segment(ws.windows.astype(np.float64)).astype(np.float32)
    return zscore_apply(ws.windows, stats).astype(np.float32)


def make_feeder(ws: WindowSet, stats: ZScoreStats | None, targets: np.ndarray, phase_count: int,
                subset: SubsetConfig | None = None) -> MeshFeeder:
    mask = None if subset is None or subset.name == "Full" else subset_mask(subset)
    return MeshFeeder(standardize(ws, stats), np.asarray(targets, np.int64), ws.ids, phase_count, mask)
