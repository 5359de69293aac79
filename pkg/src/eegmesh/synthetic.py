"""Synthetic stand-in corpus written in the same EDF+ layout as the real one.

Each subject gets its own source-to-scalp mixing and alpha frequency, and each
imagined action modulates a class-specific set of electrodes, so identity and
action are both recoverable. Only for tests and demonstrations; numbers
obtained on it say nothing about the real recordings.
"""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import Sequence

import numpy as np

from .edf import IMAGERY_RUNS, AnnotationEvent, Recording, write_edf
from .montage import MONTAGE_64

FS = 160
_FOCI = {
    # (run kind, code) -> electrodes whose rhythm changes
    ("lr", "T1"): ("C4", "C6", "CP4", "FC4"),
    ("lr", "T2"): ("C3", "C5", "CP3", "FC3"),
    ("ff", "T1"): ("C3", "C4", "FC3", "FC4"),
    ("ff", "T2"): ("Cz", "CPz", "FCz", "C1", "C2"),
}


def _subject_profile(subject: int, seed: int, n_sources: int = 6):
    rng = np.random.default_rng([seed, subject])
    mixing = rng.normal(size=(64, n_sources)) * rng.uniform(0.5, 1.5, size=(64, 1))
    freqs = rng.uniform(7.0, 13.0, size=n_sources)
    offsets = rng.normal(scale=4.0, size=64)
    return mixing, freqs, offsets


def synth_recording(subject: int, run: int, seed: int = 0, n_trials: int = 8,
                    rest_seconds: float = 60.0) -> Recording:
    mixing, freqs, offsets = _subject_profile(subject, seed)
    rng = np.random.default_rng([seed, subject, run])
    if run in (1, 2):
        n = int(rest_seconds * FS)
        events = [AnnotationEvent(0.0, n / FS, "T0")]
    else:
        events, t = [], 0.0
        for k in range(n_trials):
            events.append(AnnotationEvent(round(t, 4), 4.2, "T0"))
            t += 4.2
            events.append(AnnotationEvent(round(t, 4), 4.1, "T1" if rng.random() < 0.5 else "T2"))
            t += 4.1
        events.append(AnnotationEvent(round(t, 4), 4.2, "T0"))
        n = int(np.ceil((t + 4.2) * FS / FS)) * FS

    time = np.arange(n) / FS
    phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
    sources = np.sin(2 * np.pi * freqs[None, :] * time[:, None] + phases) * 6.0
    if run == 2:
        sources *= 1.6  # closed eyes: stronger alpha
    x = sources @ mixing.T + offsets + rng.normal(scale=3.0, size=(n, 64))
    x += 0.05 * np.cumsum(rng.normal(size=(n, 1)), axis=0)  # slow drift

    kind = "lr" if run in (3, 4, 7, 8, 11, 12) else "ff"
    index = {name: i for i, name in enumerate(MONTAGE_64)}
    for ev in events:
        foci = _FOCI.get((kind, ev.code))
        if run in (1, 2) or foci is None:
            continue
        a, b = int(round(ev.onset * FS)), min(n, int(round((ev.onset + ev.duration) * FS)))
        burst = 14.0 * np.sin(2 * np.pi * 20.0 * time[a:b])
        for name in foci:
            x[a:b, index[name]] += burst
    return Recording(subject, run, float(FS), list(MONTAGE_64), x, events)


def write_synthetic_corpus(root: str | Path, subjects: Sequence[int], runs: Sequence[int] = IMAGERY_RUNS,
                           seed: int = 0, n_trials: int = 8, rest_seconds: float = 60.0) -> list[Path]:
    """Write ``S###/S###R##.edf`` files under ``root``."""
    root = Path(root)
    paths = []
    for s in subjects:
        folder = root / f"S{s:03d}"
        folder.mkdir(parents=True, exist_ok=True)
        for r in runs:
            path = folder / f"S{s:03d}R{r:02d}.edf"
            path.write_bytes(write_edf(synth_recording(s, r, seed, n_trials, rest_seconds)))
            paths.append(path)
    return paths


def main(argv=None):
    ap = argparse.ArgumentParser(description="Write a synthetic motor-imagery corpus for demos and tests.")
    ap.add_argument("root")
    ap.add_argument("--subjects", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=8, help="imagery trials per task run")
    args = ap.parse_args(argv)
    paths = write_synthetic_corpus(args.root, range(1, args.subjects + 1), seed=args.seed, n_trials=args.trials)
    print(f"wrote {len(paths)} files under {args.root}")


if __name__ == "__main__":
    main()
