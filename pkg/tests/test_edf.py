import numpy as np
import pytest

from eegmesh.edf import (
    ACTION_SECONDS,
    ActionClass,
    AnnotationEvent,
    InvalidRun,
    MalformedHeader,
    MissingDataset,
    Recording,
    TruncatedData,
    UnknownSubject,
    UnsupportedLayout,
    derive_class,
    discover_dataset,
    extract_trials,
    filter_subjects,
    ids_from_path,
    load_recording,
    parse_edf,
    write_edf,
)
from eegmesh.montage import MONTAGE_64
from eegmesh.synthetic import synth_recording


def _recording(run=4, seconds=20, fs=160, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=40.0, size=(seconds * fs, 64))
    events = [AnnotationEvent(0.0, 4.2, "T0"), AnnotationEvent(4.2, 4.1, "T1"),
              AnnotationEvent(8.3, 4.2, "T0"), AnnotationEvent(12.5, 4.0, "T2")]
    return Recording(7, run, float(fs), list(MONTAGE_64), x, events)


def test_roundtrip_within_quantisation():
    rec = _recording()
    back = parse_edf(write_edf(rec), 7, 4)
    assert back.sample_rate == 160
    assert back.electrode_labels == list(MONTAGE_64)
    step = (rec.samples.max() - rec.samples.min()) / 65535
    assert np.max(np.abs(back.samples - rec.samples)) <= step * 1.01 + 1e-3
    assert [(e.onset, e.code) for e in back.events] == [(e.onset, e.code) for e in rec.events]
    np.testing.assert_allclose([e.duration for e in back.events], [e.duration for e in rec.events])


def test_independent_reader_agrees(tmp_path):
    mne = pytest.importorskip("mne")
    rec = synth_recording(3, 6, seed=1, n_trials=3)
    path = tmp_path / "S003R06.edf"
    path.write_bytes(write_edf(rec))
    ours = load_recording(path)
    raw = mne.io.read_raw_edf(path, preload=True, verbose="error")
    theirs = raw.get_data().T * 1e6  # volts -> microvolts
    assert raw.info["sfreq"] == ours.sample_rate
    np.testing.assert_allclose(ours.samples, theirs, atol=1e-3)
    ann = [(round(a["onset"], 4), a["description"]) for a in raw.annotations]
    assert ann == [(round(e.onset, 4), e.code) for e in ours.events]


def test_truncated_stream():
    data = write_edf(_recording())
    with pytest.raises(TruncatedData):
        parse_edf(data[:-500], 7, 4)


def test_short_or_inconsistent_header():
    data = bytearray(write_edf(_recording()))
    with pytest.raises(MalformedHeader):
        parse_edf(bytes(data[:100]), 7, 4)
    data[184:192] = b"1234    "
    with pytest.raises(MalformedHeader):
        parse_edf(bytes(data), 7, 4)
    data = bytearray(write_edf(_recording()))
    data[236:244] = b"abc     "
    with pytest.raises(MalformedHeader):
        parse_edf(bytes(data), 7, 4)


def test_wrong_channel_count():
    rec = _recording()
    rec.samples = rec.samples[:, :63]
    rec.electrode_labels = rec.electrode_labels[:63]
    with pytest.raises(UnsupportedLayout):
        parse_edf(write_edf(rec), 7, 4)


def test_unknown_record_count_reads_what_is_there():
    data = bytearray(write_edf(_recording()))
    data[236:244] = b"-1      "
    rec = parse_edf(bytes(data), 7, 4)
    assert rec.n_samples == 20 * 160


@pytest.mark.parametrize("run,code,expected", [
    (2, "T0", ActionClass.RestClosedEyes),
    (4, "T1", ActionClass.ImaginedLeftFist),
    (8, "T2", ActionClass.ImaginedRightFist),
    (6, "T1", ActionClass.ImaginedBothFists),
    (14, "T2", ActionClass.ImaginedBothFeet),
    (4, "T0", None),
    (3, "T1", None),  # executed movement run
    (1, "T0", None),
])
def test_class_table(run, code, expected):
    assert derive_class(run, code) == expected


def test_invalid_run():
    with pytest.raises(InvalidRun):
        derive_class(15, "T1")


def test_trials_clipped_to_action_window():
    trials = extract_trials(_recording(run=6))
    assert [t.label for t in trials] == [ActionClass.ImaginedBothFists, ActionClass.ImaginedBothFeet]
    assert trials[0].signal.shape == (int(ACTION_SECONDS * 160), 64)


def test_rest_run_is_one_trial():
    rec = _recording(run=2)
    (trial,) = extract_trials(rec)
    assert trial.label == ActionClass.RestClosedEyes and trial.signal.shape[0] == rec.n_samples


def test_discovery(tmp_path):
    with pytest.raises(MissingDataset):
        discover_dataset(tmp_path)
    with pytest.raises(MissingDataset):
        discover_dataset(tmp_path / "absent")
    (tmp_path / "S001").mkdir()
    (tmp_path / "S001" / "S001R04.edf").write_bytes(write_edf(_recording()))
    (tmp_path / "S001" / "notes.txt").write_text("x")
    assert list(discover_dataset(tmp_path)) == [(1, 4)]


def test_dataset_root_from_environment(tmp_path, monkeypatch):
    (tmp_path / "S002").mkdir()
    (tmp_path / "S002" / "S002R02.edf").write_bytes(write_edf(_recording(run=2)))
    monkeypatch.setenv("EEGMESH_DATASET_ROOT", str(tmp_path))
    assert list(discover_dataset()) == [(2, 2)]


def test_ids_from_path():
    assert ids_from_path("/x/S088/S088R14.edf") == (88, 14)
    with pytest.raises(ValueError):
        ids_from_path("foo.edf")


def test_parse_error_names_the_file(tmp_path):
    path = tmp_path / "S001R04.edf"
    path.write_bytes(write_edf(_recording())[:-700])
    with pytest.raises(TruncatedData, match="S001R04.edf"):
        load_recording(path)


def test_subject_filter():
    assert filter_subjects(range(1, 110), (38, 88, 89, 92, 100, 104)) == [
        s for s in range(1, 110) if s not in (38, 88, 89, 92, 100, 104)]
    assert len(filter_subjects(range(1, 110), (38, 88, 89, 92, 100, 104))) == 103
    with pytest.raises(UnknownSubject):
        filter_subjects([1, 2], [5])
