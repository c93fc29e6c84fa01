"""Cell-to-facility partitioning (VD, CIVD) and conversion of weights to volumes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geo import Facility, GeoPoint, GridCell, Region

log = logging.getLogger(__name__)

METHODS = ("VD", "VD-GPM", "VD-GNN-GPM", "CIVD", "CIVD-GPM", "CIVD-GNN-GPM")
ALL_METHODS = METHODS + ("uniform",)

# Example class weights for the synthetic benchmark's GPM baselines.
EXAMPLE_GPM_TABLE = {
    "residential": 1.0,
    "commercial": 1.0,
    "industrial": 1.0,
    "agricultural": 0.2,
    "other": 0.05,
}


class AllocationError(ValueError):
    pass


@dataclass(eq=False)
class LoadCenter:
    centroid: GeoPoint
    member_facilities: list[int]
    region_id: str = ""


@dataclass(eq=False)
class AllocationResult:
    method: str
    facility_ids: list[str]
    region_ids: list[str]
    allocated: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return {f: float(v) for f, v in zip(self.facility_ids, self.allocated)}

    def region_totals(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r, v in zip(self.region_ids, self.allocated):
            out[r] = out.get(r, 0.0) + float(v)
        return out


@dataclass(eq=False)
class CivdAssignment:
    cell_cluster: np.ndarray
    centers: list[LoadCenter] = field(default_factory=list)


# ------------------------------------------------------------------- k-means


def _sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _fill_empty(X: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Re-seed each empty cluster at the point farthest from its centre (taken from a cluster of two or more)."""
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        d2 = ((X - centers[labels]) ** 2).sum(axis=1)
        d2[counts[labels] <= 1] = -1.0
        far = int(np.argmax(d2))
        counts[labels[far]] -= 1
        labels[far], counts[c] = c, 1
        centers[c] = X[far]
    return labels


def lloyd(points, k: int, seed: int | np.random.Generator = 0, max_iter: int = 100):
    """k-means++ seeding then Lloyd iterations.

    Returns ``(centers, labels, sse_history)``.  Clusters are renumbered so
    that cluster order follows each cluster's smallest member index.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be between 1 and the number of points ({n})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist(X, X[chosen])[:, 0]
    while len(chosen) < k:
        tot = d2.sum()
        if tot > 0:
            nxt = int(rng.choice(n, p=d2 / tot))
        else:
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dist(X, X[[nxt]])[:, 0])
    centers = X[chosen].copy()
    labels = _fill_empty(X, np.argmin(_sq_dist(X, centers), axis=1), centers, k)
    history = []
    for _ in range(max_iter):
        for c in range(k):
            centers[c] = X[labels == c].mean(axis=0)
        history.append(float(((X - centers[labels]) ** 2).sum()))
        new = _fill_empty(X, np.argmin(_sq_dist(X, centers), axis=1), centers, k)
        if np.array_equal(new, labels):
            break
        labels = new
    first = [int(np.flatnonzero(labels == c)[0]) for c in range(k)]
    order = np.argsort(first, kind="stable")
    rank = np.empty(k, dtype=np.intp)
    rank[order] = np.arange(k)
    return centers[order], rank[labels], history


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 10) -> list[LoadCenter]:
    """Best of ``n_init`` seeded Lloyd runs by final within-cluster SSE."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = lloyd(X, k, rng, max_iter)
        sse = float(((X - run[0][run[1]]) ** 2).sum())
        if best is None or sse < best[0] - 1e-9 * max(1.0, best[0]):
            best = (sse, run)
    centers, labels, _ = best[1]
    return [
        LoadCenter(GeoPoint(float(x), float(y)), [int(i) for i in np.flatnonzero(labels == c)])
        for c, (x, y) in enumerate(centers)
    ]


def default_k(n_facilities: int) -> int:
    return max(1, math.ceil(math.sqrt(n_facilities)))


# --------------------------------------------------------------- assignments


def _nearest(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. the lowest index on ties
    return np.argmin(_sq_dist(points, targets), axis=1)


def _centroids(cells: Sequence[GridCell]) -> np.ndarray:
    return np.array([[c.centroid.x, c.centroid.y] for c in cells], dtype=np.float64).reshape(-1, 2)


def _by_region(items, key) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for i, it in enumerate(items):
        out.setdefault(key(it), []).append(i)
    return out


def assign_vd(cells: Sequence[GridCell], facilities: Sequence[Facility]) -> np.ndarray:
    """Nearest facility within each cell's own region; ``-1`` where the region has none."""
    out = np.full(len(cells), -1, dtype=np.intp)
    pts = _centroids(cells)
    fac_by_region = _by_region(facilities, lambda f: f.region_id)
    for rid, idx in _by_region(cells, lambda c: c.region_id).items():
        fidx = fac_by_region.get(rid)
        if not fidx:
            log.warning("region %r has no facilities; its cells stay unassigned", rid)
            continue
        locs = np.array([facilities[i].location for i in fidx], dtype=np.float64)
        out[idx] = np.asarray(fidx)[_nearest(pts[idx], locs)]
    return out


def assign_civd(cells: Sequence[GridCell], facilities: Sequence[Facility], k: int | Mapping[str, int] | None = None,
                seed: int = 0) -> CivdAssignment:
    """Cluster facilities per region into load centres; cells go to the nearest centre.

    ``k`` may be an int (same for every region), a per-region mapping, or
    ``None`` for ``ceil(sqrt(n_region_facilities))``.
    """
    out = np.full(len(cells), -1, dtype=np.intp)
    centers: list[LoadCenter] = []
    pts = _centroids(cells)
    cell_by_region = _by_region(cells, lambda c: c.region_id)
    for rid, fidx in _by_region(facilities, lambda f: f.region_id).items():
        if k is None:
            kr = default_k(len(fidx))
        elif isinstance(k, Mapping):
            kr = k.get(rid, default_k(len(fidx)))
        else:
            kr = int(k)
        locs = np.array([facilities[i].location for i in fidx], dtype=np.float64)
        region_centers = kmeans(locs, kr, seed)
        base = len(centers)
        for lc in region_centers:
            lc.member_facilities = [fidx[i] for i in lc.member_facilities]
            lc.region_id = rid
        centers.extend(region_centers)
        cidx = cell_by_region.get(rid, [])
        if cidx:
            cen = np.array([lc.centroid for lc in region_centers], dtype=np.float64)
            out[cidx] = base + _nearest(pts[cidx], cen)
    for rid in cell_by_region:
        if not any(lc.region_id == rid for lc in centers):
            log.warning("region %r has no facilities; its cells stay unassigned", rid)
    return CivdAssignment(out, centers)


# ------------------------------------------------------------------- weights


def normalize_per_region(cells: Sequence[GridCell], raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    out = np.zeros_like(raw)
    for rid, idx in _by_region(cells, lambda c: c.region_id).items():
        tot = raw[idx].sum()
        if tot > 0:
            out[idx] = raw[idx] / tot
        else:
            log.warning("region %r has zero total weight; falling back to uniform", rid)
            out[idx] = 1.0 / len(idx)
    return out


def uniform_weights(cells: Sequence[GridCell]) -> np.ndarray:
    return normalize_per_region(cells, np.ones(len(cells)))


def static_gpm_weights(cells: Sequence[GridCell], class_weight_table: Mapping[str, float],
                       class_set: Sequence[str]) -> np.ndarray:
    """Per-cell weight proportional to the table entry of its dominant class."""
    missing = [c for c in class_set if c not in class_weight_table]
    if missing:
        raise KeyError(f"class weight table lacks classes {missing}")
    table = np.array([float(class_weight_table[c]) for c in class_set])
    if np.any(table < 0):
        raise ValueError("class weights must be non-negative")
    raw = np.array([table[c.dominant] for c in cells])
    return normalize_per_region(cells, raw)


# ---------------------------------------------------------------- aggregation


def aggregate(assignment, weights, cells: Sequence[GridCell], facilities: Sequence[Facility],
              regions: Sequence[Region], method: str = "VD") -> AllocationResult:
    """Turn per-cell weights plus a partition into facility volumes.

    ``assignment`` is either a per-cell facility index array (VD path) or a
    ``CivdAssignment`` (CIVD path, cluster mass split evenly over members).
    ``weights`` is per-cell and normalised within each region.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(cells),):
        raise ValueError(f"expected {len(cells)} cell weights, got shape {w.shape}")
    total = {r.id: r.total_volume for r in regions}
    alloc = np.zeros(len(facilities))
    civd = isinstance(assignment, CivdAssignment)
    labels = assignment.cell_cluster if civd else np.asarray(assignment, dtype=np.intp)
    bad = np.flatnonzero(labels < 0)
    if len(bad):
        raise AllocationError(f"{len(bad)} cells unassigned, e.g. {cells[bad[0]].id!r}")
    vol = np.array([total[c.region_id] for c in cells]) * w
    if civd:
        mass = np.zeros(len(assignment.centers))
        np.add.at(mass, labels, vol)
        for c, lc in enumerate(assignment.centers):
            share = mass[c] / len(lc.member_facilities)
            for f in lc.member_facilities:
                alloc[f] += share
    else:
        np.add.at(alloc, labels, vol)
    # regions without cells: nothing to weight, split evenly over facilities
    with_cells = {c.region_id for c in cells}
    for rid, fidx in _by_region(facilities, lambda f: f.region_id).items():
        if rid not in with_cells and rid in total:
            log.warning("region %r has no cells; splitting its total evenly", rid)
            alloc[fidx] = total[rid] / len(fidx)
    return AllocationResult(method, [f.id for f in facilities], [f.region_id for f in facilities], alloc)


def uniform_split(facilities: Sequence[Facility], regions: Sequence[Region]) -> AllocationResult:
    total = {r.id: r.total_volume for r in regions}
    alloc = np.zeros(len(facilities))
    for rid, fidx in _by_region(facilities, lambda f: f.region_id).items():
        alloc[fidx] = total[rid] / len(fidx)
    return AllocationResult("uniform", [f.id for f in facilities], [f.region_id for f in facilities], alloc)


def allocate_all(cells: Sequence[GridCell], facilities: Sequence[Facility], regions: Sequence[Region],
                 gnn_weights, gpm_weights, k=None, seed: int = 0) -> dict[str, AllocationResult]:
    """All six method columns.  Missing ``gnn_weights`` drops the GNN columns."""
    vd = assign_vd(cells, facilities)
    civd = assign_civd(cells, facilities, k, seed)
    uni = uniform_weights(cells)
    plan = [("VD", vd, uni), ("VD-GPM", vd, gpm_weights), ("VD-GNN-GPM", vd, gnn_weights),
            ("CIVD", civd, uni), ("CIVD-GPM", civd, gpm_weights), ("CIVD-GNN-GPM", civd, gnn_weights)]
    return {m: aggregate(a, w, cells, facilities, regions, m) for m, a, w in plan if w is not None}


def write_allocations(path: str | Path, results: Sequence[AllocationResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "region_id", "facility_id", "allocated_volume"])
        for res in results:
            for rid, fid, v in zip(res.region_ids, res.facility_ids, res.allocated):
                w.writerow([res.method, rid, fid, repr(float(v))])


def read_allocations(path: str | Path) -> dict[str, AllocationResult]:
    rows: dict[str, list[tuple[str, str, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["method"], []).append(
                (row["region_id"], row["facility_id"], float(row["allocated_volume"])))
    return {
        m: AllocationResult(m, [r[1] for r in rs], [r[0] for r in rs], np.array([r[2] for r in rs]))
        for m, rs in rows.items()
    }
