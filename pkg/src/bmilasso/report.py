"""Table- and curve-shaped summaries of experiment results.

Selection metrics are rendered as percentages with one decimal and the
standard error (sample sd over the square root of the replication count) in
parentheses; MSE is rendered unscaled.  Raw values go to a sibling CSV.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .simulation import DEFAULT_ARMS, METRICS, OPTIONAL_ARMS, ArmSummary, ExperimentResult, ReplicationResult, aggregate, best_x

SCALED = ("SEN", "SPE", "F1")


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to summarize")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def format_cell(mean: float | None, se: float | None, scale: float = 1.0) -> str:
    if mean is None:
        return ""
    return f"{mean * scale:.1f} ({se * scale:.1f})"


def table_rows(summary: list[ArmSummary], arms) -> list[list[str]]:
    by_arm = {s.arm: s for s in summary}
    rows = []
    for arm in arms:
        s = by_arm.get(arm)
        cells = [arm]
        for m in METRICS:
            scale = 100.0 if m in SCALED else 1.0
            cells.append(format_cell(s.means[m], s.ses[m], scale) if s else "")
        rows.append(cells)
    return rows


def table_report(summary: list[ArmSummary], path, arms=None) -> tuple[Path, Path]:
    """Write the formatted table and its raw sibling ``*_raw.csv``."""
    path = Path(path)
    arms = list(arms) if arms is not None else [s.arm for s in summary]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", *METRICS])
        w.writerows(table_rows(summary, arms))
    raw = path.with_name(path.stem + "_raw.csv")
    by_arm = {s.arm: s for s in summary}
    with raw.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "replications", "x_pct", *(f"{m}_{k}" for m in METRICS for k in ("mean", "se")), "flags"])
        for arm in arms:
            s = by_arm.get(arm)
            if s is None:
                w.writerow([arm, "", "", *([""] * 2 * len(METRICS)), ""])
                continue
            vals = [f"{v:.17g}" for m in METRICS for v in (s.means[m], s.ses[m])]
            x = "" if s.x_pct is None else f"{s.x_pct:g}"
            w.writerow([arm, s.replications, x, *vals, ";".join(s.flags)])
    return path, raw


def scan_curve(results: list[ReplicationResult], arm: str) -> list[dict]:
    """Average SEN, SPE and distance per x% over replications, with the argmax flagged."""
    scans = [r.scans[arm] for r in results if r.error is None and arm in r.scans]
    if not scans:
        raise ValueError(f"no scan data for arm {arm!r}")
    best = best_x(scans)
    out = []
    for k, row in enumerate(scans[0]):
        sen = float(np.mean([s[k].SEN for s in scans]))
        spe = float(np.mean([s[k].SPE for s in scans]))
        dist = float(np.mean([s[k].distance for s in scans]))
        out.append({"x_pct": row.x_pct, "SEN": sen, "SPE": spe, "distance": dist, "best": row.x_pct == best})
    return out


def scan_curve_report(results: list[ReplicationResult], arm: str, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_pct", "SEN", "SPE", "distance", "best"])
        for r in scan_curve(results, arm):
            w.writerow([f"{r['x_pct']:g}", f"{r['SEN']:.17g}", f"{r['SPE']:.17g}", f"{r['distance']:.17g}", int(r["best"])])
    return path


def write_replication_logs(result: ExperimentResult, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in result.replications:
        p = directory / f"replication_{r.replication:04d}.json"
        p.write_text(json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n")
        paths.append(p)
    return paths


def load_replication_logs(directory) -> list[ReplicationResult]:
    files = sorted(Path(directory).glob("replication_*.json"))
    if not files:
        raise FileNotFoundError(f"no replication logs in {directory}")
    return [ReplicationResult.from_dict(json.loads(f.read_text())) for f in files]


def report_from_logs(directory, out_dir, arms=None, x_rule: str = "per_replication") -> list[Path]:
    """Rebuild the table and every scan curve from per-replication logs."""
    results = load_replication_logs(directory)
    ok = [r for r in results if r.error is None]
    if arms is None:
        present = set(ok[0].rows) | set(ok[0].scans) if ok else set()
        arms = [a for a in DEFAULT_ARMS + OPTIONAL_ARMS if a in present]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = list(table_report(aggregate(results, arms, x_rule), out_dir / "results.csv", arms))
    for arm in ok[0].scans if ok else []:
        written.append(scan_curve_report(results, arm, out_dir / f"scan_{_slug(arm)}.csv"))
    return written


def _slug(name: str) -> str:
    return "".join(ch.lower() if ch.isalnum() else "_" for ch in name).strip("_")
