"""EDF/EDF+ ingestion for the PhysioNet motor movement/imagery corpus.

Only the layout used by that corpus is accepted: 64 EEG signals sharing one
sampling rate plus a single ``EDF Annotations`` channel carrying T0/T1/T2 events.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .montage import EXCLUDED_1010, MONTAGE_64, UnknownElectrode, canonical_label

log = logging.getLogger(__name__)

ANNOTATION_LABEL = "EDF Annotations"
EVENT_CODES = ("T0", "T1", "T2")
ACTION_SECONDS = 4.0
N_SUBJECTS = 109
N_RUNS = 14
DATASET_ENV = "EEGMESH_DATASET_ROOT"

# Commonly dropped in the literature: 88/92/100 are sampled at 128 Hz, 89/104
# and 38 have damaged annotations or truncated runs.
DEFAULT_EXCLUSIONS = (38, 88, 89, 92, 100, 104)


class EdfError(Exception):
    pass


class MalformedHeader(EdfError):
    pass


class TruncatedData(EdfError):
    pass


class UnsupportedLayout(EdfError):
    pass


class InvalidRun(ValueError):
    pass


class UnknownSubject(ValueError):
    pass


class MissingDataset(FileNotFoundError):
    pass


class ActionClass(enum.IntEnum):
    RestClosedEyes = 0
    ImaginedLeftFist = 1
    ImaginedRightFist = 2
    ImaginedBothFists = 3
    ImaginedBothFeet = 4


@dataclass(frozen=True)
class AnnotationEvent:
    onset: float
    duration: float
    code: str


@dataclass(eq=False)
class Recording:
    subject_id: int
    run_id: int
    sample_rate: float
    electrode_labels: list[str]
    samples: np.ndarray  # [n_samples, 64], microvolts
    events: list[AnnotationEvent] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.run_id == other.run_id
            and self.sample_rate == other.sample_rate
            and self.electrode_labels == other.electrode_labels
            and self.events == other.events
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(eq=False)
class LabeledTrial:
    subject_id: int
    run_id: int
    label: ActionClass
    signal: np.ndarray  # [n_samples, 64]
    onset: float


# --------------------------------------------------------------------------
# Parsing


def _field(raw: bytes, what: str) -> str:
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError:
        raise MalformedHeader(f"non-ASCII bytes in {what}") from None


def _number(raw: bytes, what: str, kind=float):
    text = _field(raw, what)
    try:
        return kind(text)
    except ValueError:
        raise MalformedHeader(f"cannot parse {what} from {text!r}") from None


def _parse_tals(payload: bytes) -> list[AnnotationEvent]:
    events = []
    for tal in payload.split(b"\x00"):
        if not tal:
            continue
        parts = tal.split(b"\x14")
        timing = parts[0].split(b"\x15")
        try:
            onset = float(timing[0].decode("ascii"))
            duration = float(timing[1].decode("ascii")) if len(timing) > 1 and timing[1] else 0.0
        except (ValueError, UnicodeDecodeError):
            raise MalformedHeader(f"unreadable annotation timing {parts[0]!r}") from None
        for text in parts[1:]:
            code = text.decode("latin-1").strip()
            if code:
                events.append(AnnotationEvent(onset, duration, code))
    return events


def parse_edf(data: bytes, subject_id: int, run_id: int) -> Recording:
    """Decode one EDF+ file of the corpus into a :class:`Recording`."""
    if len(data) < 256:
        raise MalformedHeader("stream shorter than the 256-byte fixed header")
    header_bytes = _number(data[184:192], "header size", int)
    n_records = _number(data[236:244], "record count", int)
    record_seconds = _number(data[244:252], "record duration", float)
    n_signals = _number(data[252:256], "signal count", int)
    if n_signals <= 0 or header_bytes != 256 * (n_signals + 1):
        raise MalformedHeader(
            f"header size {header_bytes} inconsistent with {n_signals} signals"
        )
    if record_seconds <= 0:
        raise MalformedHeader(f"non-positive record duration {record_seconds}")
    if len(data) < header_bytes:
        raise MalformedHeader("stream ends inside the signal headers")

    def column(offset: int, width: int) -> list[bytes]:
        start = 256 + offset * n_signals
        return [data[start + i * width : start + (i + 1) * width] for i in range(n_signals)]

    labels = [_field(b, "signal label") for b in column(0, 16)]
    pmin = np.array([_number(b, "physical minimum") for b in column(16 + 80 + 8, 8)])
    pmax = np.array([_number(b, "physical maximum") for b in column(16 + 80 + 16, 8)])
    dmin = np.array([_number(b, "digital minimum", int) for b in column(16 + 80 + 24, 8)])
    dmax = np.array([_number(b, "digital maximum", int) for b in column(16 + 80 + 32, 8)])
    spr = np.array(
        [_number(b, "samples per record", int) for b in column(16 + 80 + 40 + 80, 8)]
    )
    if np.any(dmax <= dmin):
        raise MalformedHeader("digital maximum must exceed digital minimum")
    if np.any(spr <= 0):
        raise MalformedHeader("non-positive samples per record")

    ann_idx = [i for i, lab in enumerate(labels) if lab == ANNOTATION_LABEL]
    eeg_idx = [i for i, lab in enumerate(labels) if lab != ANNOTATION_LABEL]
    if len(ann_idx) != 1 or len(eeg_idx) != 64:
        raise UnsupportedLayout(
            f"expected 64 EEG signals plus one annotation channel, got {len(eeg_idx)} + {len(ann_idx)}"
        )
    try:
        electrodes = [canonical_label(labels[i]) for i in eeg_idx]
    except UnknownElectrode as exc:
        raise UnsupportedLayout(f"electrode {exc.args[0]!r} is not part of the montage") from None
    if len(set(electrodes)) != 64 or EXCLUDED_1010.intersection(electrodes):
        raise UnsupportedLayout("electrode labels do not form the 64-channel montage")
    if len(set(spr[eeg_idx])) != 1:
        raise UnsupportedLayout("EEG signals use different sampling rates")

    record_words = int(spr.sum())
    available = (len(data) - header_bytes) // (2 * record_words)
    if n_records < 0:
        n_records = available
    elif available < n_records:
        raise TruncatedData(f"{n_records} records declared, {available} present")

    raw = np.frombuffer(
        data, dtype="<i2", count=n_records * record_words, offset=header_bytes
    ).reshape(n_records, record_words)
    starts = np.concatenate([[0], np.cumsum(spr)])

    eeg_spr = int(spr[eeg_idx[0]])
    digital = np.empty((n_records * eeg_spr, 64), dtype=np.float64)
    for out_col, sig in enumerate(eeg_idx):
        digital[:, out_col] = raw[:, starts[sig] : starts[sig + 1]].reshape(-1)
    gain = (pmax[eeg_idx] - pmin[eeg_idx]) / (dmax[eeg_idx] - dmin[eeg_idx])
    samples = (digital - dmin[eeg_idx]) * gain + pmin[eeg_idx]

    a = ann_idx[0]
    events = []
    for rec in range(n_records):
        payload = raw[rec, starts[a] : starts[a + 1]].astype("<i2").tobytes()
        events.extend(_parse_tals(payload))

    sample_rate = eeg_spr / record_seconds
    length = samples.shape[0] / sample_rate
    clean = []
    for ev in sorted(events, key=lambda e: e.onset):
        if ev.code not in EVENT_CODES or ev.onset < 0 or ev.onset >= length:
            continue
        duration = min(ev.duration, length - ev.onset)
        if duration > 0:
            clean.append(AnnotationEvent(ev.onset, duration, ev.code))

    return Recording(
        subject_id=subject_id,
        run_id=run_id,
        sample_rate=sample_rate,
        electrode_labels=electrodes,
        samples=samples,
        events=clean,
    )


_NAME_RE = re.compile(r"S(\d{3})R(\d{2})\.edf$", re.IGNORECASE)


def ids_from_path(path: str | os.PathLike) -> tuple[int, int]:
    m = _NAME_RE.search(Path(path).name)
    if not m:
        raise ValueError(f"{path}: file name does not follow S###R##.edf")
    return int(m.group(1)), int(m.group(2))


def load_recording(path: str | os.PathLike) -> Recording:
    subject, run = ids_from_path(path)
    data = Path(path).read_bytes()
    try:
        return parse_edf(data, subject, run)
    except EdfError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def discover_dataset(root: str | os.PathLike | None = None) -> dict[tuple[int, int], Path]:
    """Index ``S###/S###R##.edf`` files under ``root`` (or ``$EEGMESH_DATASET_ROOT``)."""
    if root is None:
        root = os.environ.get(DATASET_ENV)
    if root is None or not Path(root).is_dir():
        raise MissingDataset(f"dataset root {root!r} does not exist")
    found = {}
    for path in sorted(Path(root).glob("S[0-9][0-9][0-9]/S[0-9][0-9][0-9]R[0-9][0-9].edf")):
        subject, run = ids_from_path(path)
        if path.parent.name.upper() != f"S{subject:03d}":
            continue
        found[(subject, run)] = path
    if not found:
        raise MissingDataset(f"no S###/S###R##.edf files under {root}")
    return found


# --------------------------------------------------------------------------
# Writing (used for fixtures, synthetic corpora and round-trip checks)


def _edf_number(value: float, outward: int = 0) -> str:
    """Format ``value`` into at most 8 characters, rounding away from the data
    range when ``outward`` is -1 (minimum) or +1 (maximum)."""
    if float(value).is_integer() and len(str(int(value))) <= 8:
        return str(int(value))
    for decimals in range(6, -1, -1):
        scale = 10.0**decimals
        if outward < 0:
            v = math.floor(value * scale) / scale
        elif outward > 0:
            v = math.ceil(value * scale) / scale
        else:
            v = round(value, decimals)
        text = f"{v:.{decimals}f}"
        if len(text) <= 8:
            return text
    raise ValueError(f"{value} does not fit an 8-character EDF field")


def _pad(text: str, width: int) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > width:
        raise ValueError(f"{text!r} exceeds {width} characters")
    return raw.ljust(width, b" ")


def _tal(onset: float, duration: float | None = None, text: str = "") -> bytes:
    head = f"{onset:+.4f}".rstrip("0").rstrip(".")
    if duration is not None:
        head += "\x15" + f"{duration:.4f}".rstrip("0").rstrip(".")
    return (head + "\x14" + (text + "\x14" if text else "\x14") + "\x00").encode("ascii")


def write_edf(recording: Recording, record_seconds: float = 1.0) -> bytes:
    """Serialise a recording to EDF+ bytes with 16-bit quantisation."""
    fs = recording.sample_rate
    n = recording.n_samples
    spr = int(round(fs * record_seconds))
    if spr <= 0 or abs(spr - fs * record_seconds) > 1e-9 or n % spr:
        spr, record_seconds = n, n / fs
    n_records = n // spr

    x = np.asarray(recording.samples, dtype=np.float64)
    lo, hi = x.min(axis=0), x.max(axis=0)
    flat = hi - lo < 1e-6
    lo, hi = np.where(flat, lo - 1.0, lo), np.where(flat, hi + 1.0, hi)
    pmin_txt = [_edf_number(v, -1) for v in lo]
    pmax_txt = [_edf_number(v, +1) for v in hi]
    pmin = np.array([float(t) for t in pmin_txt])
    pmax = np.array([float(t) for t in pmax_txt])
    dmin, dmax = -32768, 32767
    digital = np.round((x - pmin) / (pmax - pmin) * (dmax - dmin) + dmin)
    digital = np.clip(digital, dmin, dmax).astype("<i2")

    per_record = [[_tal(r * record_seconds)] for r in range(n_records)]
    for ev in recording.events:
        r = min(int(ev.onset // record_seconds), n_records - 1)
        per_record[r].append(_tal(ev.onset, ev.duration, ev.code))
    payloads = [b"".join(p) for p in per_record]
    ann_spr = max(len(p) for p in payloads) // 2 + 1

    ne = x.shape[1]
    ns = ne + 1
    labels = [lab for lab in recording.electrode_labels] + [ANNOTATION_LABEL]
    hdr = bytearray()
    hdr += _pad("0", 8)
    hdr += _pad(f"S{recording.subject_id:03d} X X X", 80)
    hdr += _pad("Startdate X X X X", 80)
    hdr += _pad("01.01.09", 8) + _pad("00.00.00", 8)
    hdr += _pad(str(256 * (ns + 1)), 8)
    hdr += _pad("EDF+C", 44)
    hdr += _pad(str(n_records), 8)
    hdr += _pad(_edf_number(record_seconds), 8)
    hdr += _pad(str(ns), 4)
    hdr += b"".join(_pad(lab, 16) for lab in labels)
    hdr += b"".join(_pad("", 80) for _ in labels)
    hdr += b"".join(_pad("uV", 8) for _ in range(ne)) + _pad("", 8)
    hdr += b"".join(_pad(t, 8) for t in pmin_txt) + _pad("-1", 8)
    hdr += b"".join(_pad(t, 8) for t in pmax_txt) + _pad("1", 8)
    hdr += b"".join(_pad(str(dmin), 8) for _ in range(ne)) + _pad("-32768", 8)
    hdr += b"".join(_pad(str(dmax), 8) for _ in range(ne)) + _pad("32767", 8)
    hdr += b"".join(_pad("HP:0Hz LP:0Hz", 80) for _ in labels)
    hdr += b"".join(_pad(str(spr), 8) for _ in range(ne)) + _pad(str(ann_spr), 8)
    hdr += b"".join(_pad("", 32) for _ in labels)

    body = bytearray()
    for r in range(n_records):
        body += digital[r * spr : (r + 1) * spr].T.tobytes()
        body += payloads[r].ljust(2 * ann_spr, b"\x00")
    return bytes(hdr) + bytes(body)


# --------------------------------------------------------------------------
# Labels and trials

_LEFT_RIGHT_RUNS = frozenset({4, 8, 12})
_FISTS_FEET_RUNS = frozenset({6, 10, 14})
REST_RUN = 2
IMAGERY_RUNS = (REST_RUN, 4, 6, 8, 10, 12, 14)


def derive_class(run_id: int, code: str) -> ActionClass | None:
    """Class of an annotated interval, or None when it is not one of the five."""
    if not 1 <= run_id <= N_RUNS:
        raise InvalidRun(f"run {run_id} outside 1..{N_RUNS}")
    if run_id == REST_RUN:
        return ActionClass.RestClosedEyes
    if run_id in _LEFT_RIGHT_RUNS:
        return {"T1": ActionClass.ImaginedLeftFist, "T2": ActionClass.ImaginedRightFist}.get(code)
    if run_id in _FISTS_FEET_RUNS:
        return {"T1": ActionClass.ImaginedBothFists, "T2": ActionClass.ImaginedBothFeet}.get(code)
    return None


def extract_trials(recording: Recording) -> list[LabeledTrial]:
    """Cut the admissible labelled intervals out of a recording.

    The closed-eyes baseline contributes one trial spanning the whole run;
    imagery intervals are clipped to their annotated duration and at most
    ``ACTION_SECONDS``.
    """
    fs = recording.sample_rate
    if recording.run_id == REST_RUN:
        return [
            LabeledTrial(
                recording.subject_id,
                recording.run_id,
                ActionClass.RestClosedEyes,
                recording.samples,
                0.0,
            )
        ]
    trials = []
    for ev in recording.events:
        label = derive_class(recording.run_id, ev.code)
        if label is None:
            continue
        start = int(round(ev.onset * fs))
        length = int(round(min(ev.duration, ACTION_SECONDS) * fs))
        stop = min(start + length, recording.n_samples)
        if stop <= start:
            continue
        trials.append(
            LabeledTrial(
                recording.subject_id,
                recording.run_id,
                label,
                recording.samples[start:stop],
                ev.onset,
            )
        )
    return trials


def filter_subjects(all_subjects: Sequence[int], exclusions: Iterable[int] = ()) -> list[int]:
    exclusions = set(exclusions)
    unknown = exclusions.difference(all_subjects)
    if unknown:
        raise UnknownSubject(f"excluded subjects not in corpus: {sorted(unknown)}")
    return [s for s in all_subjects if s not in exclusions]
