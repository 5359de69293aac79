"""User verification from identification-model embeddings.

Embeddings are the Bi-LSTM output of the identification network. All test
windows are compared pairwise with the Euclidean distance; same-subject pairs
are genuine, the rest impostor. A pair is accepted when its distance is at or
below the threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .dataset import WindowSet, fit_standardizer, make_feeder
from .edf import ActionClass
from .montage import get_subset
from .nn import EMBEDDING_TAP, ModelGraph
from .preprocess import ZScoreStats
from .training import (
    DEFAULT_ID_FRACTIONS,
    TrainConfig,
    fit_and_score,
    split_identification,
    subject_targets,
)

log = logging.getLogger(__name__)

SCENARIOS = ("GI-KU", "GI-UU", "GD-KU", "GD-UU")
N_UNKNOWN_USERS = 10


class WrongModelKind(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class DegeneratePairs(ValueError):
    pass


class ScenarioDataMissing(ValueError):
    pass


@dataclass(eq=False)
class Embedding:
    vector: np.ndarray
    subject_id: int
    gesture: ActionClass
    window_id: int


@dataclass(eq=False)
class DistanceMatrix:
    values: np.ndarray  # [P, P]
    subjects: np.ndarray
    gestures: np.ndarray

    def pair_scores(self) -> tuple[np.ndarray, np.ndarray]:
        """Genuine and impostor distances over unordered off-diagonal pairs."""
        iu = np.triu_indices(len(self.subjects), k=1)
        d = self.values[iu]
        same = self.subjects[iu[0]] == self.subjects[iu[1]]
        return d[same], d[~same]


@dataclass
class VerificationReport:
    scenario: str
    gesture: str
    eer: float
    threshold: float
    roc: np.ndarray  # rows (threshold, FAR, FRR), thresholds ascending
    n_genuine: int
    n_impostor: int
    rank1: float = float("nan")
    extras: dict = field(default_factory=dict)


def embed(model: ModelGraph, meshes: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Bi-LSTM activations for a batch of mesh sequences [B, T, 10, 11, 1]."""
    if model.task not in (None, "identification"):
        raise WrongModelKind(f"embeddings come from an identification model, got a {model.task!r} model")
    return model.tap(meshes.astype(model.dtype, copy=False), EMBEDDING_TAP, batch_size)


def embed_windows(model: ModelGraph, ws: WindowSet, stats: ZScoreStats | None, config: TrainConfig,
                  batch_size: int = 64) -> list[Embedding]:
    """One embedding per window: the mean over its sampling phases."""
    feeder = make_feeder(ws, stats, np.zeros(len(ws), np.int64), config.phase_count, get_subset(config.subset))
    out = []
    n = config.phase_count
    for s in range(0, len(ws), max(1, batch_size // n)):
        idx = np.arange(s, min(s + max(1, batch_size // n), len(ws)))
        x = feeder.window_batch(idx)  # [b, N, T, 10, 11, 1]
        e = embed(model, x.reshape((-1,) + x.shape[2:]), batch_size).reshape(len(idx), n, -1).mean(axis=1)
        for k, i in enumerate(idx):
            out.append(Embedding(e[k], int(ws.subjects[i]), ActionClass(int(ws.labels[i])), int(ws.ids[i])))
    return out


def distance_matrix(embeddings: Sequence[Embedding]) -> DistanceMatrix:
    if len(embeddings) < 2:
        raise ValueError("need at least two embeddings")
    dims = {e.vector.shape for e in embeddings}
    if len(dims) != 1:
        raise DimensionMismatch(f"embedding shapes differ: {sorted(dims)}")
    x = np.stack([e.vector for e in embeddings]).astype(np.float64)
    d = squareform(pdist(x, "euclidean"))
    return DistanceMatrix(
        d,
        np.array([e.subject_id for e in embeddings]),
        np.array([int(e.gesture) for e in embeddings]),
    )


def roc_curve(genuine: np.ndarray, impostor: np.ndarray) -> np.ndarray:
    """(threshold, FAR, FRR) at every distinct score, preceded by a point below
    all scores where nothing is accepted."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    if len(genuine) == 0 or len(impostor) == 0:
        raise DegeneratePairs(f"{len(genuine)} genuine and {len(impostor)} impostor pairs")
    thr = np.unique(np.concatenate([genuine, impostor]))
    far = np.searchsorted(impostor, thr, side="right") / len(impostor)
    frr = 1.0 - np.searchsorted(genuine, thr, side="right") / len(genuine)
    below = np.nextafter(thr[0], -np.inf)
    return np.column_stack([np.r_[below, thr], np.r_[0.0, far], np.r_[1.0, frr]])


def eer_from_roc(roc: np.ndarray) -> tuple[float, float]:
    """Equal error rate and its threshold, interpolated linearly between the
    two ROC points where FAR - FRR changes sign."""
    thr, far, frr = roc.T
    diff = far - frr  # non-decreasing in the threshold
    k = int(np.searchsorted(diff, 0.0, side="left"))
    if k == 0:
        return float(far[0]), float(thr[0])
    if diff[k] == 0:
        return float(far[k]), float(thr[k])
    a = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = far[k - 1] + a * (far[k] - far[k - 1])
    return float(eer), float(thr[k - 1] + a * (thr[k] - thr[k - 1]))


def rank1_rate(dm: DistanceMatrix) -> float:
    """Fraction of probes whose nearest other signal belongs to the same subject."""
    d = dm.values.copy()
    np.fill_diagonal(d, np.inf)
    nearest = d.argmin(axis=1)
    return float(np.mean(dm.subjects[nearest] == dm.subjects))


def roc_and_eer(dm: DistanceMatrix, scenario: str = "", gesture: str = "all") -> VerificationReport:
    genuine, impostor = dm.pair_scores()
    roc = roc_curve(genuine, impostor)
    eer, thr = eer_from_roc(roc)
    return VerificationReport(scenario, gesture, eer, thr, roc, len(genuine), len(impostor), rank1_rate(dm))


# --------------------------------------------------------------------------
# Scenarios


def unknown_users(subjects: Sequence[int], n: int = N_UNKNOWN_USERS, seed: int | None = None) -> list[int]:
    """Held-out users: the ``n`` highest ids, or a seeded random draw."""
    subjects = sorted(int(s) for s in subjects)
    if len(subjects) <= n:
        raise ScenarioDataMissing(f"{len(subjects)} subjects cannot hold out {n} unknown users")
    if seed is None:
        return subjects[-n:]
    rng = np.random.default_rng([seed, 505])
    return sorted(int(s) for s in rng.choice(subjects, size=n, replace=False))


@dataclass
class ScenarioResult:
    scenario: str
    reports: list[VerificationReport]
    train_subjects: list[int]
    verify_subjects: list[int]
    identification_accuracy: list[float]

    @property
    def mean_eer(self) -> float:
        return float(np.mean([r.eer for r in self.reports]))


def _train_and_verify(ws: WindowSet, config: TrainConfig, train_subjects: list[int],
                      verify_subjects: list[int], known: bool, fractions, scenario: str, gesture: str,
                      checkpoint_path=None) -> tuple[VerificationReport, float]:
    pool = ws.where(np.isin(ws.subjects, train_subjects))
    order = pool.subject_list()
    targets = subject_targets(pool.subjects, order)
    tr, va, te = split_identification(pool.subjects, fractions, config.seed)
    outcome, model = fit_and_score(
        pool.take(tr), pool.take(te), targets[tr], targets[te], len(order), config,
        f"{scenario}:{gesture}", "identification", val_ws=pool.take(va), val_targets=targets[va],
        checkpoint_path=checkpoint_path, checkpoint_extra={"subject_order": order, "scenario": scenario},
    )
    train_ws = pool.take(tr)
    stats = fit_standardizer(train_ws) if config.zscore == "corpus" else None
    if known:
        probe = pool.take(te)
    else:
        probe = ws.where(np.isin(ws.subjects, verify_subjects))
        if set(train_ws.subject_list()) & set(probe.subject_list()):
            raise AssertionError("unknown-user probes overlap the training subjects")
        log.info("%s: %d training subjects and %d verification subjects are disjoint",
                 scenario, len(train_subjects), len(verify_subjects))
    if len(probe.subject_list()) < 2:
        raise ScenarioDataMissing(f"{scenario}/{gesture}: fewer than two subjects to verify")
    report = roc_and_eer(distance_matrix(embed_windows(model, probe, stats, config)), scenario, gesture)
    return report, outcome.metrics.accuracy


def run_scenario(scenario: str, ws: WindowSet, config: TrainConfig, fractions=DEFAULT_ID_FRACTIONS,
                 n_unknown: int = N_UNKNOWN_USERS, unknown_seed: int | None = None,
                 checkpoint_dir=None) -> ScenarioResult:
    """Train identification model(s) for one scenario and score verification.

    GI pools every gesture into one model; GD trains one model per gesture and
    averages the per-gesture EERs. KU verifies held-out windows of the training
    users; UU verifies users never seen in training.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    subjects = ws.subject_list()
    gesture_dependent = scenario.startswith("GD")
    known = scenario.endswith("KU")
    if known:
        train_subjects, verify_subjects = subjects, subjects
    else:
        verify_subjects = unknown_users(subjects, n_unknown, unknown_seed)
        train_subjects = [s for s in subjects if s not in verify_subjects]
        if len(train_subjects) < 2:
            raise ScenarioDataMissing(f"{scenario}: {len(train_subjects)} training subject(s) left after the hold-out")
    if set(verify_subjects) & set(train_subjects) and not known:
        raise AssertionError("unknown users leaked into training")

    groups = [("all", ws)]
    if gesture_dependent:
        groups = [(c.name, ws.where(ws.labels == int(c))) for c in ActionClass]
    reports, accs = [], []
    for gesture, part in groups:
        if len(part) == 0:
            raise ScenarioDataMissing(f"{scenario}: no windows for gesture {gesture}")
        ckpt = None
        if checkpoint_dir is not None:
            ckpt = f"{checkpoint_dir}/{scenario}_{gesture}.ckpt"
        report, acc = _train_and_verify(part, config, train_subjects, verify_subjects, known,
                                        fractions, scenario, gesture, ckpt)
        log.info("%s %s: EER %.4f (%d genuine / %d impostor pairs)", scenario, gesture, report.eer,
                 report.n_genuine, report.n_impostor)
        reports.append(report)
        accs.append(acc)
    return ScenarioResult(scenario, reports, train_subjects, verify_subjects, accs)
