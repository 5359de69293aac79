"""Split protocols, the optimisation loop and classification metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import (
    SAMPLE_RATE,
    MeshFeeder,
    WindowSet,
    assert_disjoint,
    balance_rest,
    fit_standardizer,
    make_feeder,
)
from .montage import get_subset
from .nn import Adam, ModelGraph, build_table1_model, save_checkpoint, softmax_xent
from .nn.model import TABLE1_WIDTHS

log = logging.getLogger(__name__)

N_ACTION_CLASSES = 5


class DivergenceDetected(RuntimeError):
    pass


class TooFewExamples(ValueError):
    pass


class SubjectMissingFromTrain(ValueError):
    pass


class EmptyTestSet(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 80
    learning_rate: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    window_seconds: float = 1.0
    phase_count: int = 4
    dropout: float = 0.5
    widths: tuple[int, ...] = TABLE1_WIDTHS
    dense_units: int = 1024
    hidden: int = 128
    zscore: str = "corpus"  # or "segment"
    subset: str = "Full"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.widths = tuple(self.widths)
        for name in ("epochs", "batch_size", "phase_count", "dense_units", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.window_seconds <= 0:
            raise ValueError("learning rate and window length must be non-negative/positive")
        if self.zscore not in ("corpus", "segment"):
            raise ValueError("zscore must be 'corpus' or 'segment'")
        get_subset(self.subset)
        if self.window_samples % self.phase_count:
            raise ValueError(
                f"{self.window_samples}-sample windows are not divisible into {self.phase_count} phases"
            )

    @property
    def window_samples(self) -> int:
        m = self.window_seconds * self.sample_rate
        if abs(m - round(m)) > 1e-9:
            raise ValueError(f"window of {self.window_seconds} s is not a whole number of samples")
        return int(round(m))

    @property
    def time_steps(self) -> int:
        return self.window_samples // self.phase_count

    def build_model(self, n_classes: int, task: str | None = None, seed: int | None = None) -> ModelGraph:
        return build_table1_model(
            self.time_steps, n_classes, seed=self.seed if seed is None else seed,
            widths=self.widths, dense_units=self.dense_units, hidden=self.hidden,
            dropout=self.dropout, task=task,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# --------------------------------------------------------------------------
# Metrics


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    confusion: np.ndarray  # rows: true class, cols: predicted class

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return conf


def metrics_from_confusion(conf: np.ndarray) -> ClassificationMetrics:
    """Accuracy plus macro precision/recall over classes seen in truth or predictions."""
    conf = np.asarray(conf)
    total = conf.sum()
    if total == 0:
        raise EmptyTestSet("no predictions to score")
    tp = np.diag(conf).astype(np.float64)
    predicted = conf.sum(axis=0)
    actual = conf.sum(axis=1)
    active = (predicted > 0) | (actual > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    return ClassificationMetrics(
        accuracy=float(tp.sum() / total),
        precision=float(precision[active].mean()),
        recall=float(recall[active].mean()),
        confusion=conf,
    )


def predict(model: ModelGraph, feeder: MeshFeeder, batch_size: int = 64) -> np.ndarray:
    model.eval()
    preds = []
    for s in range(0, len(feeder), batch_size):
        x, _ = feeder.batch(np.arange(s, min(s + batch_size, len(feeder))))
        preds.append(model.forward(x.astype(model.dtype, copy=False), training=False).argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def evaluate_classification(model: ModelGraph, feeder: MeshFeeder, n_classes: int,
                            batch_size: int = 64) -> ClassificationMetrics:
    """Score every mesh-sequence example of ``feeder`` by arg-max prediction."""
    if len(feeder) == 0:
        raise EmptyTestSet("test set is empty")
    pred = predict(model, feeder, batch_size)
    truth = feeder.targets[feeder.example_window(np.arange(len(feeder)))]
    return metrics_from_confusion(confusion_matrix(truth, pred, n_classes))


# --------------------------------------------------------------------------
# Splits


def make_folds(n_examples: int, k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random k-fold partition of ``range(n_examples)``."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if n_examples < k:
        raise TooFewExamples(f"{n_examples} examples for {k} folds")
    perm = np.random.default_rng([seed, 101]).permutation(n_examples)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out


DEFAULT_ID_FRACTIONS = (0.75, 0.15, 0.10)


def split_identification(subjects: Sequence[int], fractions=DEFAULT_ID_FRACTIONS,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random train/validation/test split guaranteeing every subject appears in train.

    ``fractions`` is normalised to sum to one. Partition sizes are fixed by the
    fractions; subjects absent from train after the random draw are fixed by
    swapping one of their windows with a train window of a subject that has
    several.
    """
    subjects = np.asarray(subjects)
    frac = np.asarray(fractions, dtype=np.float64)
    if frac.shape != (3,) or np.any(frac < 0) or frac.sum() <= 0:
        raise ValueError("fractions must be three non-negative numbers")
    frac = frac / frac.sum()
    n = len(subjects)
    n_train = int(round(frac[0] * n))
    n_val = int(round(frac[1] * n))
    n_val = min(n_val, n - n_train)
    perm = np.random.default_rng([seed, 202]).permutation(n)
    part = np.empty(n, dtype=np.int8)
    part[perm[:n_train]] = 0
    part[perm[n_train : n_train + n_val]] = 1
    part[perm[n_train + n_val :]] = 2

    in_train = {int(s): int(c) for s, c in zip(*np.unique(subjects[part == 0], return_counts=True))}
    for s in np.unique(subjects):
        if in_train.get(int(s), 0):
            continue
        donor = next((i for i in perm if part[i] == 0 and in_train[int(subjects[i])] > 1), None)
        if donor is None:
            raise SubjectMissingFromTrain(f"subject {int(s)} has no training window")
        moved = perm[subjects[perm] == s][0]
        part[donor], part[moved] = part[moved], 0
        in_train[int(subjects[donor])] -= 1
        in_train[int(s)] = 1
    return tuple(np.sort(np.flatnonzero(part == p)) for p in range(3))


# --------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    best_epoch: int = -1
    steps: int = 0
    trained_ids: frozenset = frozenset()


def train(model: ModelGraph, data: MeshFeeder, config: TrainConfig, val: MeshFeeder | None = None,
          checkpoint_path=None, checkpoint_extra: dict | None = None, on_epoch: Callable[[int, float, float | None], None] | None = None) -> TrainResult:
    """Adam on shuffled mini-batches for ``config.epochs`` passes.

    With a validation feeder the parameters with the best validation accuracy
    are restored at the end (and saved to ``checkpoint_path``); otherwise the
    last epoch is kept.
    """
    if len(data) == 0:
        raise ValueError("no training data")
    rng = np.random.default_rng([config.seed, 303])
    model.reseed([config.seed, 404])
    opt = Adam(model.parameters(), lr=config.learning_rate, beta1=config.beta1,
               beta2=config.beta2, eps=config.adam_eps)
    result = TrainResult()
    used_windows: set[int] = set()
    best_acc, best_state = -1.0, None
    dtype = model.dtype

    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(data))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            if len(idx) < 2:
                continue
            x, y = data.batch(idx)
            model.zero_grad()
            logits = model.forward(x.astype(dtype, copy=False), training=True)
            loss, grad = softmax_xent(logits, y)
            if not math.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch + 1}, step {result.steps + 1}")
            if result.steps == 0:
                result.initial_loss = loss
            model.backward(grad.astype(dtype, copy=False))
            opt.step()
            result.steps += 1
            losses.append(loss)
            used_windows.update(data.ids[data.example_window(idx)].tolist())
        result.loss_curve.append(float(np.mean(losses)) if losses else float("nan"))

        acc = None
        if val is not None and len(val):
            acc = evaluate_classification(model, val, logits.shape[1]).accuracy
            result.val_accuracy.append(acc)
            if acc > best_acc:
                best_acc, result.best_epoch = acc, epoch
                best_state = _snapshot(model)
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, opt, counters={"epoch": epoch + 1, "steps": result.steps},
                                    extra={**(checkpoint_extra or {}), "val_accuracy": acc})
        else:
            result.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, result.loss_curve[-1], acc)
        log.info("epoch %d/%d loss %.4f%s", epoch + 1, config.epochs, result.loss_curve[-1],
                 "" if acc is None else f" val_acc {acc:.4f}")

    if best_state is not None:
        _restore(model, best_state)
    elif checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, opt, counters={"epoch": config.epochs, "steps": result.steps},
                        extra=checkpoint_extra)
    result.trained_ids = frozenset(used_windows)
    model.eval()
    return result


def _snapshot(model: ModelGraph):
    return ([p.data.copy() for _, p in model.parameters()], [b.copy() for _, b in model.buffers()])


def _restore(model: ModelGraph, state) -> None:
    params, buffers = state
    for (_, p), v in zip(model.parameters(), params):
        p.data[...] = v
    for (name, _), v in zip(model.buffers(), buffers):
        model.set_buffer(name, v)


# --------------------------------------------------------------------------
# Protocols


@dataclass
class FoldOutcome:
    name: str
    metrics: ClassificationMetrics
    train_result: TrainResult
    n_train_windows: int
    n_test_windows: int


def _check_no_leak(result: TrainResult, test: WindowSet) -> None:
    leaked = result.trained_ids.intersection(test.ids.tolist())
    if leaked:
        raise AssertionError(f"{len(leaked)} test windows were used in gradient steps")


def fit_and_score(train_ws: WindowSet, test_ws: WindowSet, train_targets, test_targets, n_classes: int,
                  config: TrainConfig, name: str, task: str, val_ws: WindowSet | None = None,
                  val_targets=None, checkpoint_path=None, checkpoint_extra: dict | None = None,
                  ) -> tuple[FoldOutcome, ModelGraph]:
    if len(test_ws) == 0:
        raise EmptyTestSet(f"{name}: empty test partition")
    assert_disjoint(train_ws, test_ws)
    stats = fit_standardizer(train_ws) if config.zscore == "corpus" else None
    subset = get_subset(config.subset)
    if stats is not None:
        stats.check_unseen(test_ws.ids.tolist())
    train_feed = make_feeder(train_ws, stats, train_targets, config.phase_count, subset)
    test_feed = make_feeder(test_ws, stats, test_targets, config.phase_count, subset)
    val_feed = None
    if val_ws is not None and len(val_ws):
        val_feed = make_feeder(val_ws, stats, val_targets, config.phase_count, subset)
    model = config.build_model(n_classes, task=task)
    result = train(model, train_feed, config, val=val_feed, checkpoint_path=checkpoint_path,
                   checkpoint_extra=checkpoint_extra)
    _check_no_leak(result, test_ws)
    metrics = evaluate_classification(model, test_feed, n_classes)
    return FoldOutcome(name, metrics, result, len(train_ws), len(test_ws)), model


def _ckpt(checkpoint_dir, name):
    return None if checkpoint_dir is None else f"{checkpoint_dir}/{name}.ckpt"


def run_inter_subject(ws: WindowSet, config: TrainConfig, k: int = 10, folds: Sequence[int] | None = None,
                      balance: bool = True, checkpoint_dir=None) -> list[FoldOutcome]:
    """k-fold cross validation over windows pooled from all subjects."""
    if balance:
        ws = balance_rest(ws, config.seed)
    outcomes = []
    for i, (tr, te) in enumerate(make_folds(len(ws), k, config.seed)):
        if folds is not None and i not in folds:
            continue
        out, _ = fit_and_score(ws.take(tr), ws.take(te), ws.labels[tr], ws.labels[te],
                               N_ACTION_CLASSES, config, f"fold{i + 1}", "action",
                               checkpoint_path=_ckpt(checkpoint_dir, f"fold{i + 1}"))
        log.info("fold %d accuracy %.4f", i + 1, out.metrics.accuracy)
        outcomes.append(out)
    return outcomes


def run_intra_subject(ws: WindowSet, config: TrainConfig, users: Sequence[int],
                      balance: bool = True, checkpoint_dir=None) -> list[FoldOutcome]:
    """One model per user, 90/10 split of that user's windows."""
    outcomes = []
    for user in users:
        mine = ws.where(ws.subjects == user)
        if balance:
            mine = balance_rest(mine, config.seed)
        if len(mine) < 10:
            raise InsufficientData(f"subject {user}: {len(mine)} windows, need at least 10")
        tr, te = make_folds(len(mine), 10, config.seed + int(user))[0]
        out, _ = fit_and_score(mine.take(tr), mine.take(te), mine.labels[tr], mine.labels[te],
                               N_ACTION_CLASSES, config, f"S{user:03d}", "action",
                               checkpoint_path=_ckpt(checkpoint_dir, f"S{user:03d}"))
        log.info("subject %d accuracy %.4f", user, out.metrics.accuracy)
        outcomes.append(out)
    return outcomes


def subject_targets(subjects: np.ndarray, subject_order: Sequence[int]) -> np.ndarray:
    lookup = {s: i for i, s in enumerate(subject_order)}
    return np.array([lookup[int(s)] for s in subjects], dtype=np.int64)


@dataclass
class IdentificationOutcome:
    outcome: FoldOutcome
    model: ModelGraph
    subject_order: list[int]
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    windows: WindowSet


def run_identification(ws: WindowSet, config: TrainConfig, fractions=DEFAULT_ID_FRACTIONS,
                       checkpoint_path=None) -> IdentificationOutcome:
    """Subjects as classes, random train/validation/test split of their windows."""
    order = ws.subject_list()
    targets = subject_targets(ws.subjects, order)
    tr, va, te = split_identification(ws.subjects, fractions, config.seed)
    out, model = fit_and_score(
        ws.take(tr), ws.take(te), targets[tr], targets[te], len(order), config, "identification",
        "identification", val_ws=ws.take(va), val_targets=targets[va], checkpoint_path=checkpoint_path,
        checkpoint_extra={"subject_order": order},
    )
    return IdentificationOutcome(out, model, order, (tr, va, te), ws)
