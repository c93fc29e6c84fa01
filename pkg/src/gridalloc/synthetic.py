"""Synthetic scenarios with planted cell weights, written in the ingest formats.

Regions are axis-aligned rectangles laid out side by side.  Each region is cut
into a block lattice; blocks get a land-use class drawn from probabilities
that depend on the distance to a random urban core.  Block edges are not
aligned with grid cells, so boundary cells carry mixed fractions.

Planted cell weight is ``intensity[dominant class]`` normalised per region.
Indicator values are the planted class masses, so indicator shares equal the
planted mass shares exactly.  Facility ground truth is the region total
routed through the exact Voronoi partition of the planted weights.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .allocate import assign_vd, default_k
from .geo import Facility, GeoPoint, LandUseMap, Polygon, Region, generate_grid, write_geojson

log = logging.getLogger(__name__)

CLASSES = ("residential", "commercial", "industrial", "agricultural", "other")

# class probabilities by normalised distance from the urban core: near, mid, far
ZONE_PROBS = {
    "near": (0.45, 0.40, 0.10, 0.00, 0.05),
    "mid": (0.40, 0.10, 0.25, 0.15, 0.10),
    "far": (0.08, 0.00, 0.07, 0.45, 0.40),
}


@dataclass
class SyntheticScenario:
    n_train: int = 4
    n_test: int = 2
    width: float = 10_000.0
    height: float = 10_000.0
    gap: float = 2_000.0
    blocks: int = 7
    cells_per_region: int = 400
    facilities_per_region: int = 6
    quantum: float = 1.0
    intensities: dict[str, float] = field(default_factory=lambda: {
        "residential": 3.0, "commercial": 6.0, "industrial": 4.0, "agricultural": 0.4, "other": 0.0})
    volume_range: tuple[float, float] = (50.0, 200.0)
    site_separation: float = 0.3
    site_radius: float = 0.6
    indicator_scale: float = 1e6

    def validate(self) -> None:
        if self.n_train + self.n_test < 1:
            raise ValueError("scenario needs at least one region")
        if self.facilities_per_region < 1:
            raise ValueError("scenario needs at least one facility per region")
        if self.cells_per_region < self.facilities_per_region:
            raise ValueError("fewer cells than facilities per region")
        if self.blocks < 1 or self.width <= 0 or self.height <= 0:
            raise ValueError("region geometry must be positive")
        if set(self.intensities) != set(CLASSES):
            raise ValueError(f"intensities must cover exactly {CLASSES}")
        if any(v < 0 for v in self.intensities.values()):
            raise ValueError("intensities must be non-negative")


def _rect(x0, y0, x1, y1) -> Polygon:
    return Polygon.from_coords([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def _block_classes(rng: np.random.Generator, sc: SyntheticScenario) -> np.ndarray:
    b = sc.blocks
    core = rng.uniform(0.25, 0.75, size=2) * b
    cls = np.empty((b, b), dtype=np.intp)
    for i in range(b):
        for j in range(b):
            r = math.hypot(i + 0.5 - core[0], j + 0.5 - core[1]) / b
            zone = "near" if r < 0.18 else "mid" if r < 0.38 else "far"
            cls[i, j] = rng.choice(len(CLASSES), p=np.array(ZONE_PROBS[zone]) / sum(ZONE_PROBS[zone]))
    return cls


def build_scenario(sc: SyntheticScenario, seed: int):
    """In-memory scenario: ``(regions, landuse, facilities, cells, planted)``."""
    sc.validate()
    rng = np.random.default_rng(seed)
    n = sc.n_train + sc.n_test
    regions, patches = [], []
    for r in range(n):
        x0 = r * (sc.width + sc.gap)
        regions.append(Region(id=f"R{r + 1:02d}", boundary=(_rect(x0, 0.0, x0 + sc.width, sc.height),),
                              split="train" if r < sc.n_train else "test"))
        classes = _block_classes(rng, sc)
        bw, bh = sc.width / sc.blocks, sc.height / sc.blocks
        for i in range(sc.blocks):
            for j in range(sc.blocks):
                patches.append((_rect(x0 + i * bw, j * bh, x0 + (i + 1) * bw, (j + 1) * bh),
                                CLASSES[classes[i, j]]))
    # file order groups patches by class so the class set comes out in CLASSES order
    patches.sort(key=lambda pc: CLASSES.index(pc[1]))
    present = [c for c in CLASSES if any(pc[1] == c for pc in patches)]
    landuse = LandUseMap(patches, present)

    intensity = np.array([sc.intensities[c] for c in present])
    cells, planted, facilities = [], [], []
    for reg in regions:
        rc = generate_grid(reg, landuse, sc.cells_per_region, sc.quantum)
        raw = np.array([intensity[c.dominant] for c in rc])
        if raw.sum() <= 0:
            raise ValueError(f"region {reg.id} has no cells with positive intensity")
        w = raw / raw.sum()
        masses = {c: float(w[[present[x.dominant] == c for x in rc]].sum()) for c in present}
        reg.population = masses.get("residential", 0.0) * sc.indicator_scale
        reg.gva = {
            "industry": masses.get("industrial", 0.0) * sc.indicator_scale,
            "commerce": masses.get("commercial", 0.0) * sc.indicator_scale,
            "agriculture": masses.get("agricultural", 0.0) * sc.indicator_scale,
        }
        reg.total_volume = float(np.round(rng.uniform(*sc.volume_range), 3))
        facilities.extend(_place_facilities(rng, reg, rc, w, sc))
        cells.extend(rc)
        planted.append(w)
    planted_all = np.concatenate(planted)
    _attach_truth(cells, facilities, regions, planted_all)
    return regions, landuse, facilities, cells, planted_all


def _vd_masses(cell_xy: np.ndarray, w: np.ndarray, locs: np.ndarray) -> np.ndarray:
    d = ((cell_xy[:, None, :] - locs[None, :, :]) ** 2).sum(axis=2)
    return np.bincount(np.argmin(d, axis=1), weights=w, minlength=len(locs))


def _place_facilities(rng, reg: Region, cells, w: np.ndarray, sc: SyntheticScenario) -> list[Facility]:
    """Facilities come in tight groups around a few sites.

    Sites are drawn from cells with probability mixing planted load and a
    uniform floor, kept at least ``sc.site_separation`` apart.  Members of a
    site sit on a small circle; the circle's rotation is the one whose members
    get the most even share of planted Voronoi demand.
    """
    xy = np.array([c.centroid for c in cells])
    n = sc.facilities_per_region
    n_sites = default_k(n)
    p = 0.7 * w + 0.3 / len(cells)
    p = p / p.sum()
    min_sep = sc.site_separation * min(sc.width, sc.height)
    radius = sc.site_radius * cells[0].side
    x0, y0, x1, y1 = reg.boundary[0].bounds()
    margin = 1.5 * radius
    sites: list[np.ndarray] = []
    for _ in range(10_000):
        if len(sites) == n_sites:
            break
        cand = xy[rng.choice(len(cells), p=p)] + rng.uniform(-0.5, 0.5, size=2) * cells[0].side
        inside = x0 + margin <= cand[0] <= x1 - margin and y0 + margin <= cand[1] <= y1 - margin
        if inside and all(np.hypot(*(cand - s)) >= min_sep for s in sites):
            sites.append(cand)
    else:
        raise ValueError(f"region {reg.id}: could not place {n_sites} separated sites")
    sizes = [n // n_sites + (i < n % n_sites) for i in range(n_sites)]
    placed: list[np.ndarray] = []
    for i, (site, m) in enumerate(zip(sites, sizes)):
        # competitors: members already placed plus the centres of sites still to come
        rest = np.vstack(placed + [np.array(sites[i + 1:]).reshape(-1, 2)])
        best = None
        for phi in np.linspace(0.0, 2 * np.pi / m, 48, endpoint=False):
            ang = phi + 2 * np.pi * np.arange(m) / m
            members = site + radius * np.column_stack([np.cos(ang), np.sin(ang)])
            mass = _vd_masses(xy, w, np.vstack([members, rest]))[:m]
            spread = (mass.max() - mass.min()) / mass.mean() if mass.mean() > 0 else 0.0
            if best is None or spread < best[0]:
                best = (spread, members)
            if m == 1:
                break
        placed.append(best[1])
    locs = np.vstack(placed)
    order = np.lexsort((locs[:, 1], locs[:, 0]))
    return [Facility(f"{reg.id}-F{i + 1}", GeoPoint(float(x), float(y)), reg.id)
            for i, (x, y) in enumerate(locs[order])]


def _attach_truth(cells, facilities, regions, planted: np.ndarray) -> None:
    total = {r.id: r.total_volume for r in regions}
    nearest = assign_vd(cells, facilities)
    demand = np.zeros(len(facilities))
    np.add.at(demand, nearest, planted * np.array([total[c.region_id] for c in cells]))
    for f, d in zip(facilities, demand):
        f.ground_truth_demand = float(d)


def generate_synthetic(sc: SyntheticScenario, out_dir: str | Path, seed: int) -> dict[str, Path]:
    """Write a scenario to ``out_dir``; returns the written paths by role."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regions, landuse, facilities, cells, planted = build_scenario(sc, seed)
    paths = {
        "regions": out / "regions.geojson",
        "landuse": out / "landuse.geojson",
        "indicators": out / "indicators.csv",
        "facilities": out / "facilities.csv",
        "planted_weights": out / "planted_weights.csv",
        "scenario": out / "scenario.json",
    }
    note = "synthetic planar metres (local engineering grid)"
    write_geojson(paths["regions"], [({"id": r.id, "split": r.split}, r.boundary) for r in regions], note)
    write_geojson(paths["landuse"], [({"class": c}, [p]) for p, c in landuse.patches], note)
    with open(paths["indicators"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cats = list(regions[0].gva)
        w.writerow(["region_id", "population", "total_volume"] + [f"gva_{c}" for c in cats])
        for r in regions:
            w.writerow([r.id, repr(r.population), repr(r.total_volume)] + [repr(r.gva[c]) for c in cats])
    with open(paths["facilities"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "region_id", "x", "y", "ground_truth_demand"])
        for f in facilities:
            w.writerow([f.id, f.region_id, repr(f.location.x), repr(f.location.y), repr(f.ground_truth_demand)])
    with open(paths["planted_weights"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "cell_id", "weight"])
        for c, x in zip(cells, planted):
            w.writerow([c.region_id, c.id, repr(float(x))])
    meta = asdict(sc)
    meta["seed"] = seed
    paths["scenario"].write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return paths


def read_planted(path: str | Path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["cell_id"]: float(row["weight"]) for row in csv.DictReader(fh)}
