"""RMSE scoring, the six-method comparison table and weight-recovery metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .allocate import METHODS, AllocationResult
from .geo import Facility, GridCell, Region

GNN_PAIRS = (("VD-GPM", "VD-GNN-GPM"), ("CIVD-GPM", "CIVD-GNN-GPM"))


class MissingGroundTruth(ValueError):
    def __init__(self, facility_ids: Sequence[str]):
        super().__init__(f"no ground_truth_demand for facilities: {', '.join(facility_ids)}")
        self.facility_ids = list(facility_ids)


def rmse(result: AllocationResult, facilities: Sequence[Facility]) -> float:
    """Root mean squared error over ``facilities`` (looked up by id in ``result``)."""
    missing = [f.id for f in facilities if f.ground_truth_demand is None]
    if missing:
        raise MissingGroundTruth(missing)
    if not facilities:
        return 0.0
    alloc = result.as_dict()
    err = np.array([alloc[f.id] - f.ground_truth_demand for f in facilities])
    return float(np.sqrt(np.mean(err * err)))


def percent_change(baseline: float, gnn: float) -> float:
    """Reduction of ``gnn`` relative to ``baseline`` in percent (positive is better)."""
    if baseline == 0:
        return math.nan
    return (baseline - gnn) / baseline * 100.0


@dataclass(eq=False)
class ComparisonRow:
    region_id: str
    split: str
    rmse: dict[str, float] = field(default_factory=dict)

    @property
    def gain(self) -> dict[str, float]:
        return {gnn: percent_change(self.rmse[base], self.rmse[gnn])
                for base, gnn in GNN_PAIRS if base in self.rmse and gnn in self.rmse}


def comparison_rows(results: Mapping[str, AllocationResult], facilities: Sequence[Facility],
                    regions: Sequence[Region]) -> list[ComparisonRow]:
    missing = [f.id for f in facilities if f.ground_truth_demand is None]
    if missing:
        raise MissingGroundTruth(missing)
    rows = []
    for reg in regions:
        facs = [f for f in facilities if f.region_id == reg.id]
        row = ComparisonRow(reg.id, reg.split)
        for m in METHODS:
            if m in results:
                row.rmse[m] = rmse(results[m], facs)
        rows.append(row)
    return rows


def run_matrix(cells: Sequence[GridCell], facilities: Sequence[Facility], regions: Sequence[Region],
               gnn_weights, gpm_weights, k=None, seed: int = 0):
    """Allocate with every method and score each region; returns ``(rows, results)``."""
    from .allocate import allocate_all

    results = allocate_all(cells, facilities, regions, gnn_weights, gpm_weights, k, seed)
    return comparison_rows(results, facilities, regions), results


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def write_comparison_csv(path: str | Path, rows: Sequence[ComparisonRow]) -> None:
    methods = [m for m in METHODS if rows and m in rows[0].rmse]
    gains = [g for _, g in GNN_PAIRS if g in methods]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "split"] + methods + [f"{g}_pct_vs_GPM" for g in gains])
        for r in rows:
            w.writerow([r.region_id, r.split] + [_fmt(r.rmse[m]) for m in methods]
                       + [_fmt(r.gain[g]) for g in gains])


def average_gain(rows: Sequence[ComparisonRow], method: str, split: str | None = None) -> float:
    vals = [r.gain[method] for r in rows if (split is None or r.split == split)
            and method in r.gain and not math.isnan(r.gain[method])]
    return float(np.mean(vals)) if vals else math.nan


def format_table(rows: Sequence[ComparisonRow]) -> str:
    """Aligned text table grouped by split, GNN columns annotated with % change."""
    methods = [m for m in METHODS if rows and m in rows[0].rmse]
    head = ["Region"] + methods
    body: list[list[str]] = []
    for split in dict.fromkeys(r.split for r in rows):
        body.append([f"[{split}]"] + [""] * len(methods))
        for r in (r for r in rows if r.split == split):
            cells = [r.region_id]
            for m in methods:
                txt = f"{r.rmse[m]:.3f}"
                if m in r.gain:
                    g = r.gain[m]
                    txt += " (n/a)" if math.isnan(g) else f" ({g:+.2f}%)"
                cells.append(txt)
            body.append(cells)
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    lines = ["  ".join(h.ljust(widths[0]) if i == 0 else h.rjust(widths[i]) for i, h in enumerate(head))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row)))
    lines.append("")
    for _, g in GNN_PAIRS:
        if g in methods:
            for split in dict.fromkeys(r.split for r in rows):
                avg = average_gain(rows, g, split)
                lines.append(f"average RMSE reduction {g} vs GPM ({split}): "
                             + ("n/a" if math.isnan(avg) else f"{avg:+.2f}%"))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ weight quality


@dataclass(eq=False)
class WeightQuality:
    region_id: str
    spearman_rho: float | None  # None when either vector is constant
    top_decile_overlap: float


def top_fraction_overlap(pred: np.ndarray, truth: np.ndarray, fraction: float = 0.1) -> float:
    m = max(1, math.ceil(fraction * len(pred)))
    top_p = set(np.argsort(-pred, kind="stable")[:m].tolist())
    top_t = set(np.argsort(-truth, kind="stable")[:m].tolist())
    return len(top_p & top_t) / m


def weight_quality(predicted, planted, cells: Sequence[GridCell]) -> list[WeightQuality]:
    """Per-region Spearman correlation and top-10% overlap of cell weights."""
    pred = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(planted, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape != (len(cells),):
        raise ValueError("predicted and planted weights must cover the same cells")
    out = []
    groups: dict[str, list[int]] = {}
    for i, c in enumerate(cells):
        groups.setdefault(c.region_id, []).append(i)
    for rid, idx in groups.items():
        p, t = pred[idx], truth[idx]
        if len(idx) < 2 or np.ptp(p) == 0 or np.ptp(t) == 0:
            rho = None
        else:
            rho = float(stats.spearmanr(p, t).statistic)
        out.append(WeightQuality(rid, rho, top_fraction_overlap(p, t)))
    return out


def write_weight_quality(path: str | Path, rows: Sequence[WeightQuality], splits: Mapping[str, str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "split", "spearman_rho", "top_decile_overlap"])
        for q in rows:
            w.writerow([q.region_id, splits.get(q.region_id, ""),
                        "undefined" if q.spearman_rho is None else f"{q.spearman_rho:.6f}",
                        f"{q.top_decile_overlap:.6f}"])
