"""Electrode montage of the motor-imagery corpus and its 10x11 mesh layout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Channel order used by the corpus EDF files.
MONTAGE_64 = (
    "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6",
    "C5", "C3", "C1", "Cz", "C2", "C4", "C6",
    "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6",
    "Fp1", "Fpz", "Fp2",
    "AF7", "AF3", "AFz", "AF4", "AF8",
    "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT7", "FT8", "T7", "T8", "T9", "T10", "TP7", "TP8",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO3", "POz", "PO4", "PO8",
    "O1", "Oz", "O2", "Iz",
)

# 10-10 positions absent from the corpus.
EXCLUDED_1010 = frozenset(
    {"Nz", "F9", "F10", "FT9", "FT10", "A1", "A2", "TP9", "TP10", "P9", "P10"}
)

GRID_ROWS = 10
GRID_COLS = 11

# (first column, electrodes left to right) per grid row, top to bottom.
_GRID_SPEC = (
    (4, ("Fp1", "Fpz", "Fp2")),
    (3, ("AF7", "AF3", "AFz", "AF4", "AF8")),
    (1, ("F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8")),
    (1, ("FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8")),
    (0, ("T9", "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8", "T10")),
    (1, ("TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8")),
    (1, ("P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8")),
    (3, ("PO7", "PO3", "POz", "PO4", "PO8")),
    (4, ("O1", "Oz", "O2")),
    (5, ("Iz",)),
)

_CANONICAL = {name.upper(): name for name in MONTAGE_64}


class UnknownElectrode(KeyError):
    pass


def canonical_label(raw: str) -> str:
    """Map an EDF signal label such as ``"Fc5."`` or ``"Iz.."`` to its montage name."""
    key = raw.strip().rstrip(".").strip().upper()
    if key.startswith("EEG "):
        key = key[4:].strip()
    try:
        return _CANONICAL[key]
    except KeyError:
        raise UnknownElectrode(raw) from None


def _default_mapping() -> dict[str, tuple[int, int]]:
    mapping = {}
    for row, (first_col, names) in enumerate(_GRID_SPEC):
        for offset, name in enumerate(names):
            mapping[name] = (row, first_col + offset)
    return mapping


@dataclass(frozen=True)
class ElectrodeLayout:
    """Placement of electrodes on the 10x11 grid.

    ``labels`` fixes the channel order expected on input; ``mapping`` gives the
    (row, col) cell of every electrode.
    """

    labels: tuple[str, ...] = MONTAGE_64
    mapping: dict[str, tuple[int, int]] = field(default_factory=_default_mapping)

    def __post_init__(self):
        cells = [self.mapping[name] for name in self.labels]
        if len(set(cells)) != len(cells):
            raise ValueError("electrode layout is not injective")
        for r, c in cells:
            if not (0 <= r < GRID_ROWS and 0 <= c < GRID_COLS):
                raise ValueError(f"cell {(r, c)} outside the {GRID_ROWS}x{GRID_COLS} grid")

    @property
    def occupied_cells(self) -> list[tuple[int, int]]:
        return [self.mapping[name] for name in self.labels]

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index arrays aligned with ``labels``."""
        cells = np.array(self.occupied_cells, dtype=np.intp)
        return cells[:, 0], cells[:, 1]

    def occupancy(self) -> np.ndarray:
        grid = np.zeros((GRID_ROWS, GRID_COLS), dtype=bool)
        rows, cols = self.index_arrays()
        grid[rows, cols] = True
        return grid


DEFAULT_LAYOUT = ElectrodeLayout()


@dataclass(frozen=True)
class SubsetConfig:
    name: str
    kept_electrodes: tuple[str, ...]

    def __post_init__(self):
        unknown = [e for e in self.kept_electrodes if e not in _CANONICAL.values()]
        if unknown:
            raise UnknownElectrode(", ".join(unknown))


SUBSETS = {
    "Full": SubsetConfig("Full", MONTAGE_64),
    "Enobio8": SubsetConfig("Enobio8", ("Fpz", "C3", "C4", "Pz")),
    "EEGlass4": SubsetConfig("EEGlass4", ("Fpz", "T9", "T10", "Iz")),
    "EEGlass3": SubsetConfig("EEGlass3", ("Fpz", "T9", "T10")),
    "EEGlass2": SubsetConfig("EEGlass2", ("T9", "T10")),
}


def get_subset(name: str) -> SubsetConfig:
    try:
        return SUBSETS[name]
    except KeyError:
        raise ValueError(f"unknown subset {name!r}; expected one of {sorted(SUBSETS)}") from None
