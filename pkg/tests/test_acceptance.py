"""Acceptance criteria. Run with ``pytest tests/test_acceptance.py``; a
PASS/FAIL line per criterion is printed in the terminal summary.

Criteria that need the motor-imagery corpus read it from
``$EEGMESH_DATASET_ROOT`` and fail when it is absent.
"""

import math
import os
import time

import numpy as np
import pytest

from eegmesh.biometrics import eer_from_roc, roc_curve
from eegmesh.cli import main as cli_main
from eegmesh.corpus import ingest, load_windows
from eegmesh.dataset import make_feeder
from eegmesh.edf import DATASET_ENV, ActionClass
from eegmesh.montage import DEFAULT_LAYOUT, SUBSETS
from eegmesh.nn import (
    ELU,
    Adam,
    BatchNorm,
    BiLSTM,
    Dense,
    Dropout,
    TimeDistConv3x3,
    TimeDistFlatten,
    build_table1_model,
    softmax_xent,
)
from eegmesh.nn.gradcheck import check_points
from eegmesh.preprocess import (
    Segment,
    apply_subset,
    mesh_array,
    phase_indices,
    phased_subsample,
    to_mesh,
    zscore_apply,
    zscore_fit,
)
from eegmesh.reporting import ACCURACY_BAND, EER_BAND, build_tables, compare
from eegmesh.training import TrainConfig, predict, run_identification

PREPROCESS = "preprocessing property suite"
GRADIENTS = "gradient verification"
OPTIM = "optimization sanity"
EER = "EER oracle equivalence"
DESK_ID = "desk-scale identification >= 95%"
DESK_SUBSET = "desk-scale subset ordering Full > EEGlass2"
TARGETS = "full-reproduction report emitter"
DETERMINISM = "determinism"


def _real_corpus():
    root = os.environ.get(DATASET_ENV)
    if not root or not os.path.isdir(root):
        pytest.fail(f"motor-imagery corpus not available (${DATASET_ENV} unset or missing)", pytrace=False)
    return root


# ---------------------------------------------------------------------------
# Preprocessing properties (< 1 min)


@pytest.mark.criterion(PREPROCESS)
@pytest.mark.parametrize("m,n", [(80, 4), (160, 4), (40, 4), (8, 2)])
def test_phased_subsample_partition_and_reconstruction(m, n):
    t0 = time.time()
    idx = phase_indices(m, n)
    assert np.array_equal(np.sort(idx.ravel()), np.arange(m))
    assert len(np.unique(idx)) == m
    x = np.random.default_rng(m * 10 + n).normal(size=(m, 64))
    stack = phased_subsample(Segment(x, 1, ActionClass.RestClosedEyes), n).sub_segments
    assert stack.shape == (n, m // n, 64)
    rebuilt = np.empty_like(x)
    rebuilt[idx.ravel()] = stack.reshape(m, 64)
    assert np.array_equal(rebuilt, x)
    assert time.time() - t0 < 60


@pytest.mark.criterion(PREPROCESS)
def test_zscore_postconditions():
    rng = np.random.default_rng(0)
    for scale, shift in [(1.0, 0.0), (50.0, -300.0), (1e-3, 7.0)]:
        data = rng.normal(size=(500, 160, 64)) * scale + shift
        z = zscore_apply(data, zscore_fit(data))
        flat = z.reshape(-1, 64)
        assert np.max(np.abs(flat.mean(axis=0))) < 1e-6
        assert np.max(np.abs(flat.std(axis=0) - 1)) < 1e-6


@pytest.mark.criterion(PREPROCESS)
def test_mesh_injectivity():
    mesh = mesh_array(np.arange(1, 65, dtype=float)[None, :])[0, :, :, 0]
    assert sorted(mesh[mesh != 0].astype(int).tolist()) == list(range(1, 65))
    assert np.count_nonzero(mesh) == 64 and np.count_nonzero(mesh == 0) == 46
    assert len(set(DEFAULT_LAYOUT.occupied_cells)) == 64


@pytest.mark.criterion(PREPROCESS)
@pytest.mark.parametrize("name", sorted(SUBSETS))
def test_mask_idempotence(name):
    seg = Segment(np.random.default_rng(1).normal(size=(160, 64)), 1, ActionClass.RestClosedEyes)
    for mesh in to_mesh(phased_subsample(seg, 4)):
        once = apply_subset(mesh, SUBSETS[name])
        assert np.array_equal(apply_subset(once, SUBSETS[name]).tensor, once.tensor)


# ---------------------------------------------------------------------------
# Gradient verification (< 5 min), float64, 20 random points per tensor

N_POINTS = 20
LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3
H = 1e-4


def _table1_layers(rng):
    """(name, layer, input shape) for every layer of the network at full width."""
    b, t = 2, 2
    rows = []
    cin = 1
    for k, cout in enumerate((32, 64, 128, 256), start=1):
        rows.append((f"conv{k}", TimeDistConv3x3(cin, cout, rng), (b, t, 10, 11, cin)))
        rows.append((f"bn{k}", BatchNorm(cout), (b, t, 10, 11, cout)))
        rows.append((f"elu{k}", ELU(), (b, t, 10, 11, cout)))
        cin = cout
    rows += [
        ("flatten", TimeDistFlatten(), (b, t, 10, 11, 256)),
        ("fc1", Dense(28160, 1024, rng), (b, t, 28160)),
        ("dropout", Dropout(0.5, np.random.default_rng(0)), (b, t, 1024)),
        ("bn5", BatchNorm(1024), (b, t, 1024)),
        ("elu5", ELU(), (b, t, 1024)),
        ("bilstm", BiLSTM(1024, 128, rng), (b, 3, 1024)),
        ("fc2", Dense(256, 5, rng), (b, 256)),
    ]
    return rows


_GRAD_T0 = []


@pytest.mark.criterion(GRADIENTS)
@pytest.mark.parametrize("index", range(19))
def test_layer_gradients(index):
    if not _GRAD_T0:
        _GRAD_T0.append(time.time())
    rng = np.random.default_rng(100 + index)
    name, layer, shape = _table1_layers(np.random.default_rng(0))[index]
    layer.astype(np.float64)
    for p in layer.params():  # move away from the zero bias initialisation
        p.data += rng.normal(scale=0.05, size=p.shape)
    x = rng.normal(size=shape)
    out_shape = (shape[0], 256) if isinstance(layer, BiLSTM) else layer.output_shape(shape)
    w = rng.normal(size=out_shape)

    def forward():
        if isinstance(layer, Dropout):
            layer.rng = np.random.default_rng(5)
        return layer.forward(x, True)

    def loss():
        return float(np.sum(forward() * w))

    for p in layer.params():
        p.zero_grad()
    forward()
    dx = layer.backward(w)
    errors = [r[3] for r in check_points(loss, x, dx, N_POINTS, rng, h=H)]
    for p in layer.params():
        errors += [r[3] for r in check_points(loss, p.data, p.grad, N_POINTS, rng, h=H)]
    print(f"{name}: max relative error {max(errors):.2e}")
    assert max(errors) <= LAYER_TOL


@pytest.mark.criterion(GRADIENTS)
def test_network_gradient():
    rng = np.random.default_rng(7)
    model = build_table1_model(2, 5, seed=3, dtype=np.float64)
    x = rng.normal(size=(2, 2, 10, 11, 1))
    y = np.array([1, 3])

    def loss():
        model.reseed(11)
        return softmax_xent(model.forward(x, training=True), y)[0]

    model.zero_grad()
    model.reseed(11)
    _, g = softmax_xent(model.forward(x, training=True), y)
    model.backward(g)
    params = model.parameters()
    errors = []
    for _ in range(N_POINTS):
        _, p = params[rng.integers(len(params))]
        errors += [r[3] for r in check_points(loss, p.data, p.grad, 1, rng, h=H)]
    print(f"network: max relative error {max(errors):.2e}")
    assert max(errors) <= NETWORK_TOL
    if _GRAD_T0:
        assert time.time() - _GRAD_T0[0] < 300


# ---------------------------------------------------------------------------
# Optimisation sanity on real windows (< 10 min)


@pytest.mark.criterion(OPTIM)
def test_overfit_one_real_batch(tmp_path):
    root = _real_corpus()
    t0 = time.time()
    cache = tmp_path / "cache"
    ingest(root, cache, subjects=[1])
    ws = load_windows(cache, 160)
    rng = np.random.default_rng(0)
    pick = np.concatenate([rng.choice(np.flatnonzero(ws.labels == c), size=7 if c < 4 else 4, replace=False)
                           for c in range(5)])[:32]
    batch = ws.take(np.sort(pick))
    feed = make_feeder(batch, None, batch.labels, 4)
    x, y = feed.batch(np.arange(len(batch)) * 4)  # one phase per window: 32 examples
    model = build_table1_model(40, 5, seed=0)
    opt = Adam(model.parameters(), lr=1e-4)
    first, _ = softmax_xent(model.forward(x, training=False), y)
    assert abs(first - math.log(5)) <= 0.2
    acc = 0.0
    for step in range(200):
        model.zero_grad()
        _, g = softmax_xent(model.forward(x, training=True), y)
        model.backward(g)
        opt.step()
        acc = float(np.mean(model.forward(x, training=False).argmax(1) == y))
        if acc == 1.0:
            break
    print(f"initial loss {first:.3f}; train accuracy {acc:.3f} after {step + 1} steps; {time.time() - t0:.0f}s")
    assert acc == 1.0
    assert time.time() - t0 < 600


# ---------------------------------------------------------------------------
# EER oracle (< 1 min)


def _exhaustive_eer(genuine, impostor):
    thresholds = np.unique(np.concatenate([genuine, impostor]))
    far = np.array([np.mean(impostor <= t) for t in thresholds])
    frr = np.array([np.mean(genuine > t) for t in thresholds])
    k = int(np.argmin(np.abs(far - frr)))
    return (far[k] + frr[k]) / 2, thresholds[k], thresholds


@pytest.mark.criterion(EER)
@pytest.mark.parametrize("seed", range(5))
def test_eer_matches_sweep(seed):
    rng = np.random.default_rng(seed)
    genuine, impostor = rng.normal(0.0, 1.0, 500), rng.normal(1.5, 1.0, 500)
    eer, thr = eer_from_roc(roc_curve(genuine, impostor))
    ref, ref_thr, grid = _exhaustive_eer(genuine, impostor)
    k = np.searchsorted(grid, ref_thr)
    step = max(grid[min(k + 1, len(grid) - 1)] - grid[k], grid[k] - grid[max(k - 1, 0)])
    assert abs(thr - ref_thr) <= step
    assert abs(eer - ref) <= 1 / 500


@pytest.mark.criterion(EER)
def test_eer_separable():
    rng = np.random.default_rng(3)
    eer, _ = eer_from_roc(roc_curve(rng.uniform(0, 1, 500), rng.uniform(2, 3, 500)))
    assert eer == 0.0


@pytest.mark.criterion(EER)
def test_eer_identical_distributions():
    rng = np.random.default_rng(4)
    s = rng.normal(size=1000)
    eer, _ = eer_from_roc(roc_curve(s[:500], s[500:]))
    assert abs(eer - 0.5) <= 0.05


# ---------------------------------------------------------------------------
# Desk-scale runs on five real subjects


def _desk_config(subset="Full"):
    return TrainConfig(epochs=20, window_seconds=1.0, phase_count=4, subset=subset, seed=0)


@pytest.fixture(scope="module")
def desk_windows(tmp_path_factory):
    root = _real_corpus()
    cache = tmp_path_factory.mktemp("desk_cache")
    ingest(root, cache, subjects=[1, 2, 3, 4, 5])
    return load_windows(cache, 160)


@pytest.mark.criterion(DESK_ID)
def test_desk_identification(desk_windows):
    t0 = time.time()
    res = run_identification(desk_windows, _desk_config())
    acc = res.outcome.metrics.accuracy
    print(f"held-out window accuracy {acc:.4f} in {(time.time() - t0) / 60:.1f} min")
    assert acc >= 0.95


@pytest.mark.criterion(DESK_SUBSET)
def test_desk_subset_ordering(desk_windows):
    full = run_identification(desk_windows, _desk_config("Full")).outcome.metrics.accuracy
    two = run_identification(desk_windows, _desk_config("EEGlass2")).outcome.metrics.accuracy
    print(f"Full {full:.4f} vs EEGlass2 {two:.4f}")
    assert full > two


# ---------------------------------------------------------------------------
# Report emitter for the long reproduction runs


@pytest.mark.criterion(TARGETS)
def test_report_compares_against_reference_tables():
    summaries = [
        {"name": "inter", "task": "action", "scope": "inter", "subset": "Full", "accuracy": 0.9210,
         "precision": 0.95, "recall": 0.85, "n_classes": 5, "n_users": 103},
        {"name": "intra", "task": "action", "scope": "intra", "subset": "Full", "accuracy": 0.99,
         "n_classes": 5, "n_users": 103},
        {"name": "ident", "task": "identity", "subset": "Full", "accuracy": 0.9990, "n_classes": 109,
         "n_users": 109},
    ] + [
        {"name": sc, "task": "verify", "scenario": sc, "subset": "Full", "eer": e, "n_users": 109}
        for sc, e in [("GI-KU", 0.02), ("GI-UU", 0.09), ("GD-KU", 0.004), ("GD-UU", 0.05)]
    ]
    rows = {(c.experiment, c.metric): c for s in summaries for c in compare(s)}
    expected = {
        ("action-inter/Full", "accuracy"): (93.89, ACCURACY_BAND, True),
        ("action-inter/Full", "precision"): (95.90, ACCURACY_BAND, True),
        ("action-inter/Full", "recall"): (91.80, ACCURACY_BAND, False),
        ("action-intra/Full", "accuracy"): (98.43, ACCURACY_BAND, True),
        ("identity/Full", "accuracy"): (99.98, ACCURACY_BAND, True),
        ("verify-GI-KU/Full", "eer"): (1.07, EER_BAND, True),
        ("verify-GI-UU/Full", "eer"): (6.16, EER_BAND, False),
        ("verify-GD-KU/Full", "eer"): (0.39, EER_BAND, True),
        ("verify-GD-UU/Full", "eer"): (3.88, EER_BAND, True),
    }
    assert set(rows) == set(expected)
    for key, (target, band, within) in expected.items():
        assert rows[key].target == target and rows[key].band == band
        assert rows[key].within is within
    assert ACCURACY_BAND == 3.0 and EER_BAND == 2.0
    tables = build_tables(summaries)
    assert tables["action_inter"][0] == ["Method", "Accuracy", "Precision", "Recall", "Actions", "Users"]
    assert tables["verification"][1][0][1:] == ["2.00%", "9.00%", "0.40%", "5.00%"]
    assert any(r[-1] == "diverges" for r in tables["comparison"][1])


@pytest.mark.criterion(TARGETS)
def test_subset_table_targets():
    names = ["Full", "Enobio8", "EEGlass4", "EEGlass3", "EEGlass2"]
    summaries = [{"name": n, "task": t, "scope": "inter", "subset": n, "accuracy": 0.5, "precision": 0.5,
                  "recall": 0.5, "n_classes": 5, "n_users": 103} for n in names for t in ("action", "identity")]
    header, rows = build_tables(summaries)["subsets"]
    assert [r[0] for r in rows] == names
    assert [r[3] for r in rows] == ["93.89%", "79.14%", "78.76%", "71.99%", "55.66%"]
    assert [r[4] for r in rows] == ["99.98%", "44.55%", "59.15%", "46.47%", "35.13%"]


# ---------------------------------------------------------------------------
# Determinism


@pytest.mark.criterion(DETERMINISM)
def test_rerun_is_byte_identical(synth_root, tmp_path):
    assert cli_main(["ingest", "--dataset-root", str(synth_root), "--out", str(tmp_path)]) == 0
    tiny = ["--epochs", "2", "--widths", "4,8", "--dense-units", "16", "--hidden", "8", "--lr", "1e-3",
            "--window", "0.5", "--seed", "5", "--cache", str(tmp_path / "cache")]
    outputs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["train", "--task", "identity", "--out", str(out / "id"), *tiny]) == 0
        assert cli_main(["train", "--task", "action", "--fold-indices", "1", "--out", str(out / "act"),
                         *tiny]) == 0
        assert cli_main(["verify", "--scenario", "GI-UU", "--n-unknown", "2", "--out", str(out / "ver"),
                         *tiny]) == 0
        outputs[run] = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*.csv"))}
    assert outputs["a"].keys() == outputs["b"].keys() and len(outputs["a"]) >= 6
    for name, data in outputs["a"].items():
        assert data == outputs["b"][name], f"{name} differs between reruns"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
