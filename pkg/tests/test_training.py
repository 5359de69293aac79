import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_MODEL
from eegmesh.corpus import load_windows
from eegmesh.dataset import LeakageError, WindowSet, assert_disjoint, balance_rest, make_feeder
from eegmesh.edf import ActionClass
from eegmesh.nn import load_checkpoint
from eegmesh.training import (
    DivergenceDetected,
    EmptyTestSet,
    SubjectMissingFromTrain,
    TooFewExamples,
    TrainConfig,
    confusion_matrix,
    evaluate_classification,
    make_folds,
    metrics_from_confusion,
    run_identification,
    run_inter_subject,
    split_identification,
    subject_targets,
    train,
)


def _config(**kw):
    base = dict(epochs=2, learning_rate=1e-3, window_seconds=0.25, seed=0, **SMALL_MODEL)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_ws(synth_cache):
    ws = load_windows(synth_cache, 40)
    rng = np.random.default_rng(0)
    return ws.take(np.sort(rng.choice(len(ws), 240, replace=False)))


def test_macro_metrics_match_sklearn(rng):
    sk = pytest.importorskip("sklearn.metrics")
    y = rng.integers(0, 5, 300)
    p = np.where(rng.random(300) < 0.6, y, rng.integers(0, 5, 300))
    m = metrics_from_confusion(confusion_matrix(y, p, 5))
    assert m.accuracy == pytest.approx(sk.accuracy_score(y, p))
    assert m.precision == pytest.approx(sk.precision_score(y, p, average="macro"))
    assert m.recall == pytest.approx(sk.recall_score(y, p, average="macro"))


def test_macro_metrics_skip_absent_classes():
    m = metrics_from_confusion(confusion_matrix([0, 0, 1], [0, 1, 1], 5))
    assert m.precision == pytest.approx((1 + 0.5) / 2)
    assert m.recall == pytest.approx((0.5 + 1) / 2)
    with pytest.raises(EmptyTestSet):
        metrics_from_confusion(np.zeros((3, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 300), st.integers(2, 10), st.integers(0, 2**16))
def test_folds_partition(n, k, seed):
    folds = make_folds(n, k, seed)
    assert len(folds) == k
    tests = np.concatenate([te for _, te in folds])
    assert np.array_equal(np.sort(tests), np.arange(n))
    for tr, te in folds:
        assert not np.intersect1d(tr, te).size and len(tr) + len(te) == n
        assert abs(len(te) - n / k) < 1


def test_folds_need_enough_examples():
    with pytest.raises(TooFewExamples):
        make_folds(5, 10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=4, max_size=120), st.integers(0, 1000))
def test_identification_split_properties(subjects, seed):
    subjects = np.array(subjects)
    counts = np.bincount(subjects)
    if len(np.unique(subjects)) > round(0.75 * len(subjects)):
        with pytest.raises(SubjectMissingFromTrain):
            split_identification(subjects, seed=seed)
        return
    tr, va, te = split_identification(subjects, seed=seed)
    allidx = np.concatenate([tr, va, te])
    assert np.array_equal(np.sort(allidx), np.arange(len(subjects)))
    assert set(subjects[tr]) == set(subjects)
    assert len(tr) == round(0.75 * len(subjects))
    assert counts.sum() == len(subjects)


def test_identification_split_is_seeded():
    s = np.repeat(np.arange(5), 40)
    a, b = split_identification(s, seed=3), split_identification(s, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[2], split_identification(s, seed=4)[2])


def test_balance_rest_to_median():
    labels = np.array([0] * 50 + [1] * 10 + [2] * 12 + [3] * 8 + [4] * 11)
    n = len(labels)
    ws = WindowSet(np.arange(n, dtype=np.float32).reshape(n, 1, 1).repeat(64, 2).reshape(n, 1, 64),
                   np.ones(n, np.int64), np.ones(n, np.int64), labels, np.arange(n))
    out = balance_rest(ws, 0)
    assert out.class_counts() == {0: 11, 1: 10, 2: 12, 3: 8, 4: 11}


def test_leakage_guard_checks_ids_and_content(small_ws):
    a, b = small_ws.take(np.arange(10)), small_ws.take(np.arange(10, 20))
    assert_disjoint(a, b)
    with pytest.raises(LeakageError):
        assert_disjoint(a, small_ws.take(np.arange(5, 15)))
    clone = WindowSet(a.windows[:1], a.subjects[:1], a.runs[:1], a.labels[:1], np.array([-1]))
    with pytest.raises(LeakageError):
        assert_disjoint(a, clone)


def test_window_ids_unique(synth_cache):
    ws = load_windows(synth_cache, 160)
    assert len(np.unique(ws.ids)) == len(ws)
    assert set(ws.labels.tolist()) == {int(c) for c in ActionClass}


def test_config_rejects_indivisible_window():
    with pytest.raises(ValueError):
        TrainConfig(window_seconds=0.25, phase_count=3)


def test_training_reduces_loss_and_is_reproducible(small_ws):
    cfg = _config(epochs=3)
    targets = subject_targets(small_ws.subjects, small_ws.subject_list())
    feed = make_feeder(small_ws, None, targets, cfg.phase_count)
    runs = []
    for _ in range(2):
        model = cfg.build_model(len(small_ws.subject_list()))
        runs.append((train(model, feed, cfg), model))
    (r1, m1), (r2, m2) = runs
    assert r1.loss_curve == r2.loss_curve
    assert r1.loss_curve[-1] < r1.initial_loss
    assert abs(r1.initial_loss - np.log(4)) < 0.3
    for (_, p), (_, q) in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_divergence_detected(small_ws):
    cfg = _config(epochs=1)
    bad = WindowSet(np.full_like(small_ws.windows[:8], np.nan), small_ws.subjects[:8], small_ws.runs[:8],
                    small_ws.labels[:8], small_ws.ids[:8])
    feed = make_feeder(bad, None, np.zeros(8, np.int64), cfg.phase_count)
    with pytest.raises(DivergenceDetected):
        train(cfg.build_model(2), feed, cfg)


def test_identification_protocol(small_ws, tmp_path):
    cfg = _config(epochs=3)
    res = run_identification(small_ws, cfg, checkpoint_path=tmp_path / "id.ckpt")
    tr, va, te = res.split
    assert set(small_ws.subjects[tr]) == set(small_ws.subject_list())
    assert not set(small_ws.ids[te]) & res.outcome.train_result.trained_ids
    assert res.outcome.metrics.accuracy > 0.8
    ck = load_checkpoint(tmp_path / "id.ckpt")
    assert ck.extra["subject_order"] == small_ws.subject_list()
    assert ck.model.task == "identification"
    test = small_ws.take(te)
    from eegmesh.dataset import fit_standardizer

    feed = make_feeder(test, fit_standardizer(small_ws.take(tr)), subject_targets(test.subjects, res.subject_order), 4)
    assert evaluate_classification(ck.model, feed, 4).accuracy == pytest.approx(res.outcome.metrics.accuracy)


def test_inter_subject_single_fold(small_ws):
    (out,) = run_inter_subject(small_ws, _config(epochs=1), k=10, folds=[0])
    assert out.name == "fold1"
    assert out.metrics.total == out.n_test_windows * 4
