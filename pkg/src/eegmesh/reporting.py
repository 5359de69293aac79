"""Result tables and comparison against the published reference numbers."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

# Percentages reported for the full corpus.
REFERENCE_TARGETS = {
    ("action-inter", "accuracy"): 93.89,
    ("action-inter", "precision"): 95.90,
    ("action-inter", "recall"): 91.80,
    ("action-intra", "accuracy"): 98.43,
    ("identity", "accuracy"): 99.98,
    ("verify-GI-KU", "eer"): 1.07,
    ("verify-GI-UU", "eer"): 6.16,
    ("verify-GD-KU", "eer"): 0.39,
    ("verify-GD-UU", "eer"): 3.88,
}

SUBSET_TARGETS = {
    # subset: (action accuracy, identification accuracy)
    "Full": (93.89, 99.98),
    "Enobio8": (79.14, 44.55),
    "EEGlass4": (78.76, 59.15),
    "EEGlass3": (71.99, 46.47),
    "EEGlass2": (55.66, 35.13),
}
SUBSET_ORDER = ("Full", "Enobio8", "EEGlass4", "EEGlass3", "EEGlass2")

ACCURACY_BAND = 3.0  # percentage points
EER_BAND = 2.0


class NoResults(FileNotFoundError):
    pass


@dataclass
class Comparison:
    experiment: str
    metric: str
    measured: float
    target: float
    band: float

    @property
    def within(self) -> bool:
        return abs(self.measured - self.target) <= self.band

    @property
    def status(self) -> str:
        return "within" if self.within else "diverges"


def experiment_key(summary: dict) -> str:
    task = summary["task"]
    if task == "action":
        return f"action-{summary.get('scope', 'inter')}"
    if task == "identity":
        return "identity"
    return f"verify-{summary['scenario']}"


def compare(summary: dict) -> list[Comparison]:
    """Reference comparisons for one completed experiment (percent units)."""
    key = experiment_key(summary)
    rows = []
    subset = summary.get("subset", "Full")
    for (exp, metric), target in REFERENCE_TARGETS.items():
        if exp != key or metric not in summary:
            continue
        if subset != "Full":
            if metric != "accuracy" or key not in ("action-inter", "identity"):
                continue
            target = SUBSET_TARGETS[subset][0 if key == "action-inter" else 1]
        band = EER_BAND if metric == "eer" else ACCURACY_BAND
        rows.append(Comparison(f"{key}/{subset}", metric, 100.0 * summary[metric], target, band))
    return rows


def load_summaries(results_dir) -> list[dict]:
    root = Path(results_dir)
    if not root.is_dir():
        raise NoResults(f"{results_dir} is not a directory")
    found = []
    for path in sorted(root.rglob("summary*.json")):
        found.extend(json.loads(path.read_text()))
    if not found:
        raise NoResults(f"no completed experiments under {results_dir}")
    return found


def _pct(x) -> str:
    return "-" if x is None else f"{100.0 * x:.2f}%"


def to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def to_markdown(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def build_tables(summaries: list[dict]) -> dict[str, tuple[list[str], list[list]]]:
    tables = {}
    exp_rows = []
    for s in summaries:
        exp_rows.append([
            s["name"], experiment_key(s), s.get("subset", "Full"), s.get("window_seconds"), s.get("seed"),
            _pct(s.get("accuracy")), _pct(s.get("precision")), _pct(s.get("recall")), _pct(s.get("eer")),
            s.get("n_users"),
        ])
    tables["experiments"] = (
        ["Experiment", "Kind", "Subset", "Window", "Seed", "Accuracy", "Precision", "Recall", "EER", "Users"],
        exp_rows,
    )

    full = [s for s in summaries if s.get("subset", "Full") == "Full"]
    inter = [s for s in full if experiment_key(s) == "action-inter"]
    if inter:
        tables["action_inter"] = (
            ["Method", "Accuracy", "Precision", "Recall", "Actions", "Users"],
            [[s["name"], _pct(s["accuracy"]), _pct(s["precision"]), _pct(s["recall"]), s["n_classes"], s["n_users"]]
             for s in inter],
        )
    intra = [s for s in full if experiment_key(s) == "action-intra"]
    if intra:
        tables["action_intra"] = (
            ["Method", "Accuracy", "Actions", "Users"],
            [[s["name"], _pct(s["accuracy"]), s["n_classes"], s["n_users"]] for s in intra],
        )
    ident = [s for s in full if experiment_key(s) == "identity"]
    if ident:
        tables["identification"] = (
            ["Method", "Accuracy", "Users"],
            [[s["name"], _pct(s["accuracy"]), s["n_users"]] for s in ident],
        )
    verif = {s["scenario"]: s for s in full if s["task"] == "verify"}
    if verif:
        tables["verification"] = (
            ["Method", "EER GI-KU", "EER GI-UU", "EER GD-KU", "EER GD-UU"],
            [["measured"] + [_pct(verif[k]["eer"]) if k in verif else "-" for k in
                             ("GI-KU", "GI-UU", "GD-KU", "GD-UU")]],
        )

    by_subset: dict[str, list] = {}
    for s in summaries:
        key = experiment_key(s)
        if key in ("action-inter", "identity"):
            col = 0 if key == "action-inter" else 1
            by_subset.setdefault(s.get("subset", "Full"), [None, None])[col] = s["accuracy"]
    if by_subset:
        tables["subsets"] = (
            ["Configuration", "Action accuracy", "Identification accuracy",
             "Reference action", "Reference identification"],
            [[name, _pct(by_subset[name][0]), _pct(by_subset[name][1]),
              f"{SUBSET_TARGETS[name][0]:.2f}%", f"{SUBSET_TARGETS[name][1]:.2f}%"]
             for name in SUBSET_ORDER if name in by_subset],
        )

    comp = [c for s in summaries for c in compare(s)]
    if comp:
        tables["comparison"] = (
            ["Experiment", "Metric", "Measured", "Reference", "Band", "Status"],
            [[c.experiment, c.metric, f"{c.measured:.2f}", f"{c.target:.2f}", f"+/-{c.band:.1f}", c.status]
             for c in comp],
        )
    return tables


def write_report(results_dir, out_dir=None) -> dict[str, Path]:
    summaries = load_summaries(results_dir)
    out = Path(out_dir or results_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    md = []
    for name, (header, rows) in build_tables(summaries).items():
        path = out / f"{name}.csv"
        path.write_text(to_csv(header, rows))
        written[name] = path
        md.append(f"## {name}\n\n{to_markdown(header, rows)}")
    (out / "report.md").write_text("\n".join(md))
    written["markdown"] = out / "report.md"
    return written
