import csv
import json
import os

import pytest

from eegmesh.cli import LOCK_NAME, ExperimentManifest, InvalidManifest, main

TINY = ["--epochs", "1", "--widths", "4,8", "--dense-units", "16", "--hidden", "8", "--lr", "1e-3"]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def results(tmp_path_factory, synth_root):
    out = tmp_path_factory.mktemp("results")
    assert main(["ingest", "--dataset-root", str(synth_root), "--out", str(out)]) == 0
    return out


def _train(results, name, *extra):
    return main(["train", "--cache", str(results / "cache"), "--out", str(results / name), *TINY, *extra])


def test_ingest_prints_counts(synth_root, tmp_path, capsys):
    assert main(["ingest", "--dataset-root", str(synth_root), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "subjects: 4" in out and "S001 trials" in out


def test_ingest_uses_environment_root(synth_root, tmp_path, monkeypatch):
    monkeypatch.setenv("EEGMESH_DATASET_ROOT", str(synth_root))
    assert main(["ingest", "--out", str(tmp_path)]) == 0


def test_ingest_missing_dataset(tmp_path, monkeypatch):
    monkeypatch.delenv("EEGMESH_DATASET_ROOT", raising=False)
    assert main(["ingest", "--out", str(tmp_path)]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["ingest", "--dataset-root", str(tmp_path / "empty"), "--out", str(tmp_path)]) == 2


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["train", "--out", str(tmp_path), "--window", "0.3"]) == 1
    assert main(["train", "--out", str(tmp_path), "--window", "0.25", "--phases", "3"]) == 1
    assert main(["train", "--out", str(tmp_path), "--subset", "EEGlass9"]) == 1
    assert not any(tmp_path.iterdir())  # rejected before any output


def test_manifest_validation():
    with pytest.raises(InvalidManifest):
        ExperimentManifest.from_dict({"out": "x", "bogus": 1})
    with pytest.raises(InvalidManifest):
        ExperimentManifest.from_dict({"task": "action"})
    ExperimentManifest.from_dict({"out": "x", "window_seconds": 0.5, "phase_count": 8}).validate()
    m = ExperimentManifest.from_dict({"out": "x", "window_seconds": 0.5, "phase_count": 3})
    with pytest.raises(InvalidManifest):
        m.validate()


def test_missing_cache_is_a_data_error(tmp_path):
    assert main(["train", "--out", str(tmp_path / "o"), "--cache", str(tmp_path / "nocache")]) == 2


def test_lock_rejects_concurrent_use(results, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / LOCK_NAME).write_text("999")
    assert main(["train", "--cache", str(results / "cache"), "--out", str(out), *TINY]) == 1


def test_identity_run_is_deterministic(results):
    args = ("--task", "identity", "--window", "0.25")
    assert _train(results, "id_a", *args) == 0
    assert _train(results, "id_b", *args) == 0
    for name in ("metrics.csv", "loss_curves.csv", "checkpoints.csv"):
        assert (results / "id_a" / name).read_bytes() == (results / "id_b" / name).read_bytes()
    (row,) = _rows(results / "id_a" / "metrics.csv")
    assert row["row"] == "identification"
    assert (results / "id_a" / "checkpoints" / "identification.ckpt").is_file()
    assert not (results / "id_a" / LOCK_NAME).exists()


def test_config_file_and_flag_override(results, tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"out": str(results / "from_config"), "task": "identity", "window_seconds": 0.25,
                               "cache": str(results / "cache"), "subjects": [1, 2], "seed": 7}))
    assert main(["train", "--config", str(cfg), *TINY, "--seed", "3"]) == 0
    saved = json.loads((results / "from_config" / "manifest.json").read_text())
    assert saved["seed"] == 3 and saved["subjects"] == [1, 2]
    summary = json.loads((results / "from_config" / "summary_train.json").read_text())
    assert summary[0]["n_users"] == 2


def test_inter_subject_ten_folds_plus_mean(results):
    assert _train(results, "inter", "--task", "action", "--scope", "inter", "--subjects", "1,2") == 0
    rows = _rows(results / "inter" / "metrics.csv")
    assert [r["row"] for r in rows] == [f"fold{i}" for i in range(1, 11)] + ["mean"]
    mean = sum(float(r["accuracy"]) for r in rows[:10]) / 10
    assert float(rows[-1]["accuracy"]) == pytest.approx(mean, abs=1e-6)


def test_intra_subject_rows(results):
    assert _train(results, "intra", "--task", "action", "--scope", "intra", "--users", "1,3",
                  "--window", "0.5") == 0
    assert [r["row"] for r in _rows(results / "intra" / "metrics.csv")] == ["S001", "S003", "mean"]


def test_subset_run(results):
    assert _train(results, "eeglass2", "--task", "identity", "--subset", "EEGlass2", "--window", "0.5") == 0
    summary = json.loads((results / "eeglass2" / "summary_train.json").read_text())
    assert summary[0]["subset"] == "EEGlass2"


def test_verify_gesture_dependent(results):
    base = ["verify", "--cache", str(results / "cache"), *TINY, "--window", "0.5"]
    assert main(base + ["--scenario", "GD-KU", "--out", str(results / "gd")]) == 0
    assert main(base + ["--scenario", "GD-KU", "--out", str(results / "gd2")]) == 0
    rows = _rows(results / "gd" / "verification_GD-KU.csv")
    assert [r["gesture"] for r in rows] == [
        "RestClosedEyes", "ImaginedLeftFist", "ImaginedRightFist", "ImaginedBothFists", "ImaginedBothFeet", "mean"]
    assert (results / "gd" / "verification_GD-KU.csv").read_bytes() == \
        (results / "gd2" / "verification_GD-KU.csv").read_bytes()
    assert (results / "gd" / "roc_GD-KU_ImaginedBothFeet.csv").is_file()


def test_verify_unknown_users(results):
    assert main(["verify", "--cache", str(results / "cache"), *TINY, "--window", "0.5", "--scenario", "GI-UU",
                 "--n-unknown", "2", "--out", str(results / "uu")]) == 0
    (row,) = _rows(results / "uu" / "verification_GI-UU.csv")
    assert int(row["n_impostor"]) > 0


def test_verify_from_checkpoint(results):
    ckpt = results / "id_a" / "checkpoints" / "identification.ckpt"
    common = ["verify", "--cache", str(results / "cache"), *TINY, "--window", "0.25"]
    assert main(common + ["--checkpoint", str(ckpt), "--out", str(results / "ku")]) == 0
    assert main(common + ["--checkpoint", str(results / "nope.ckpt"), "--out", str(results / "ku2")]) == 2


def test_report(results, tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 2
    assert main(["report", str(results)]) == 0
    completed = list(results.rglob("summary*.json"))
    rows = _rows(results / "report" / "experiments.csv")
    assert len(rows) == len(completed)
    subsets = _rows(results / "report" / "subsets.csv")
    assert {r["Configuration"] for r in subsets} >= {"Full", "EEGlass2"}
    assert (results / "report" / "report.md").read_text().startswith("## experiments")


def test_outputs_stay_under_out_dir(results, tmp_path):
    before = set(os.listdir(results))
    assert _train(results, "contained", "--task", "identity", "--window", "0.25", "--subjects", "1,2") == 0
    assert set(os.listdir(results)) - before == {"contained"}
