"""Signal preprocessing: filtering, windowing, phased subsampling, z-scoring and
mesh encoding."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .edf import ActionClass, LabeledTrial
from .montage import DEFAULT_LAYOUT, GRID_COLS, GRID_ROWS, ElectrodeLayout, SubsetConfig, UnknownElectrode

FILTER_ORDER = 4


class SignalTooShort(ValueError):
    pass


class InvalidCutoff(ValueError):
    pass


class WindowTooLarge(ValueError):
    pass


class InvalidPhaseCount(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


class DegenerateElectrodeWarning(RuntimeWarning):
    pass


# --------------------------------------------------------------------------
# High-pass filtering


def design_highpass(fs: float, cutoff: float, order: int = FILTER_ORDER) -> np.ndarray:
    """Butterworth high-pass as second-order sections."""
    if not 0 < cutoff < fs / 2:
        raise InvalidCutoff(f"cutoff {cutoff} Hz must lie in (0, {fs / 2}) Hz")
    return sps.butter(order, cutoff, btype="highpass", fs=fs, output="sos")


def highpass(x: np.ndarray, fs: float, cutoff: float = 1.0, order: int = FILTER_ORDER) -> np.ndarray:
    """Zero-phase (forward-backward) high-pass filter applied per column."""
    sos = design_highpass(fs, cutoff, order)
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * (2 * len(sos) + 1)
    if x.shape[0] <= padlen:
        raise SignalTooShort(f"{x.shape[0]} samples; need more than {padlen}")
    return sps.sosfiltfilt(sos, x, axis=0)


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase resampling along time, used for the few recordings not at 160 Hz."""
    if fs_in == fs_out:
        return x
    from fractions import Fraction

    ratio = Fraction(fs_out / fs_in).limit_denominator(1000)
    return sps.resample_poly(x, ratio.numerator, ratio.denominator, axis=0)


# --------------------------------------------------------------------------
# Segmentation and phased subsampling


@dataclass(eq=False)
class Segment:
    samples: np.ndarray  # [M, C]
    subject_id: int
    label: ActionClass


@dataclass(eq=False)
class SubSegmentStack:
    sub_segments: np.ndarray  # [N, M // N, C]
    subject_id: int
    label: ActionClass

    @property
    def phase_count(self) -> int:
        return self.sub_segments.shape[0]


def segment(trial: LabeledTrial, window_samples: int) -> list[Segment]:
    """Consecutive non-overlapping windows; the trailing remainder is dropped."""
    n = trial.signal.shape[0]
    if window_samples < 1 or window_samples > n:
        raise WindowTooLarge(f"window of {window_samples} samples for a {n}-sample trial")
    return [
        Segment(trial.signal[k * window_samples : (k + 1) * window_samples], trial.subject_id, trial.label)
        for k in range(n // window_samples)
    ]


def phase_indices(m: int, n: int) -> np.ndarray:
    """Zero-based sample indices of every sub-segment, shape [n, m // n].

    Row ``p`` picks samples ``p, p + n, p + 2n, ...``.
    """
    if n < 1 or n > m:
        raise InvalidPhaseCount(f"phase count {n} for a {m}-sample segment")
    return np.arange(n)[:, None] + n * np.arange(m // n)[None, :]


def subsample_array(windows: np.ndarray, n: int) -> np.ndarray:
    """Phased subsampling along axis -2: [..., M, C] -> [..., N, M // N, C]."""
    idx = phase_indices(windows.shape[-2], n)
    return windows[..., idx, :]


def phased_subsample(seg: Segment, n: int) -> SubSegmentStack:
    return SubSegmentStack(subsample_array(seg.samples, n), seg.subject_id, seg.label)


# --------------------------------------------------------------------------
# Z-score standardisation


@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: frozenset = frozenset()

    def check_unseen(self, ids) -> None:
        """Raise if any of ``ids`` contributed to the fit."""
        overlap = self.fitted_on.intersection(ids)
        if overlap:
            raise ValueError(f"{len(overlap)} evaluation windows were used to fit z-score stats")


def zscore_fit(data: np.ndarray, fitted_on: Sequence = ()) -> ZScoreStats:
    """Per-electrode mean and population std over every leading axis of ``data``."""
    flat = np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1])
    if flat.shape[0] < 2:
        raise ValueError("need at least two samples per electrode")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    bad = ~(std > 0)
    if bad.any():
        warnings.warn(
            f"{int(bad.sum())} electrode(s) have zero variance; using std = 1",
            DegenerateElectrodeWarning,
            stacklevel=2,
        )
        std = np.where(bad, 1.0, std)
    return ZScoreStats(mean, std, frozenset(fitted_on))


def zscore_apply(x: np.ndarray, stats: ZScoreStats) -> np.ndarray:
    return (x - stats.mean) / stats.std


def zscore_per_segment(windows: np.ndarray) -> np.ndarray:
    """Standardise each window on its own statistics (alternative mode)."""
    mean = windows.mean(axis=-2, keepdims=True)
    std = windows.std(axis=-2, keepdims=True)
    return (windows - mean) / np.where(std > 0, std, 1.0)


# --------------------------------------------------------------------------
# Mesh encoding


@dataclass(eq=False)
class MeshSequence:
    tensor: np.ndarray  # [T, 10, 11, 1]
    subject_id: int
    label: ActionClass


def mesh_array(stack: np.ndarray, layout: ElectrodeLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Relocate electrode values onto the grid: [..., T, C] -> [..., T, 10, 11, 1]."""
    if stack.shape[-1] != len(layout.labels):
        raise LayoutMismatch(f"{stack.shape[-1]} channels for a {len(layout.labels)}-electrode layout")
    rows, cols = layout.index_arrays()
    out = np.zeros(stack.shape[:-1] + (GRID_ROWS, GRID_COLS, 1), dtype=stack.dtype)
    out[..., rows, cols, 0] = stack
    return out


def to_mesh(stack: SubSegmentStack, layout: ElectrodeLayout = DEFAULT_LAYOUT) -> list[MeshSequence]:
    """One mesh sequence per sampling phase."""
    meshes = mesh_array(stack.sub_segments, layout)
    return [MeshSequence(m, stack.subject_id, stack.label) for m in meshes]


def subset_mask(subset: SubsetConfig, layout: ElectrodeLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Boolean [10, 11, 1] grid with True on the kept electrodes' cells."""
    mask = np.zeros((GRID_ROWS, GRID_COLS, 1), dtype=bool)
    for name in subset.kept_electrodes:
        if name not in layout.mapping:
            raise UnknownElectrode(f"{name} has no cell in the layout")
        r, c = layout.mapping[name]
        mask[r, c, 0] = True
    return mask


def apply_subset(mesh: MeshSequence, subset: SubsetConfig, layout: ElectrodeLayout = DEFAULT_LAYOUT) -> MeshSequence:
    masked = np.where(subset_mask(subset, layout), mesh.tensor, 0).astype(mesh.tensor.dtype)
    return MeshSequence(masked, mesh.subject_id, mesh.label)
