"""Ingestion of regions, land use, indicators and facilities; grid rasterisation.

All geometry is planar (metres).  Polygons are stored as numpy rings with the
closing vertex dropped; a region boundary is a tuple of such polygons.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import shapely

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Inconsistent or incomplete input files."""


class GeometryParseError(DatasetError):
    def __init__(self, message: str, path: str | Path, offset: int):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class GeoPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class Polygon:
    exterior: np.ndarray
    holes: tuple[np.ndarray, ...] = ()

    @classmethod
    def from_coords(cls, exterior, holes=()) -> "Polygon":
        return cls(_open_ring(exterior), tuple(_open_ring(h) for h in holes))

    @property
    def rings(self) -> tuple[np.ndarray, ...]:
        return (self.exterior,) + self.holes

    def to_shapely(self) -> shapely.Polygon:
        return shapely.Polygon(self.exterior, [h for h in self.holes])

    def bounds(self) -> tuple[float, float, float, float]:
        xs, ys = self.exterior[:, 0], self.exterior[:, 1]
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())


Boundary = tuple[Polygon, ...]


def _open_ring(coords) -> np.ndarray:
    ring = np.asarray(coords, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] < 2:
        raise ValueError("ring must be a list of [x, y] positions")
    ring = ring[:, :2]
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(ring) < 3:
        raise ValueError("ring needs at least three distinct vertices")
    return ring


def boundary_to_shapely(boundary: Boundary):
    parts = [p.to_shapely() for p in boundary]
    return parts[0] if len(parts) == 1 else shapely.MultiPolygon(parts)


def boundary_bounds(boundary: Boundary) -> tuple[float, float, float, float]:
    b = np.array([p.bounds() for p in boundary])
    return float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max())


@dataclass(eq=False)
class Region:
    id: str
    boundary: Boundary
    population: float = 0.0
    gva: dict[str, float] = field(default_factory=dict)
    total_volume: float = 0.0
    split: str = "train"

    def indicator(self, name: str) -> float:
        """Indicator by column-style name: ``population`` or ``gva_<category>``."""
        if name == "population":
            return self.population
        if name.startswith("gva_") and name[4:] in self.gva:
            return self.gva[name[4:]]
        raise KeyError(f"region {self.id} has no indicator {name!r}")

    def indicator_names(self) -> list[str]:
        return ["population"] + [f"gva_{k}" for k in self.gva]


@dataclass(eq=False)
class LandUseMap:
    patches: list[tuple[Polygon, str]]
    class_set: list[str]


@dataclass(frozen=True, eq=False)
class GridCell:
    id: str
    region_id: str
    centroid: GeoPoint
    side: float
    fractions: np.ndarray
    dominant_onehot: np.ndarray
    row: int = 0
    col: int = 0

    @property
    def dominant(self) -> int:
        return int(np.argmax(self.dominant_onehot))


@dataclass(eq=False)
class Facility:
    id: str
    location: GeoPoint
    region_id: str
    ground_truth_demand: float | None = None


# ------------------------------------------------------------ point in polygon


def points_in_polygon(points, poly: Polygon | Sequence[Polygon]) -> np.ndarray:
    """Even-odd membership of many points; points on any edge count as inside."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    px, py = pts[:, 0], pts[:, 1]
    polys = [poly] if isinstance(poly, Polygon) else list(poly)
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    for pg in polys:
        for ring in pg.rings:
            x0, y0 = ring[:, 0], ring[:, 1]
            x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
            scale = max(1.0, float(np.abs(ring).max()))
            tol = 1e-12 * scale
            for i in range(len(ring)):
                ax, ay, bx, by = x0[i], y0[i], x1[i], y1[i]
                straddle = (ay > py) != (by > py)
                if np.any(straddle):
                    xcross = ax + (py[straddle] - ay) * (bx - ax) / (by - ay)
                    hit = np.zeros_like(straddle)
                    hit[straddle] = px[straddle] < xcross
                    inside ^= hit
                cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                seg = math.hypot(bx - ax, by - ay)
                on_edge |= (
                    (np.abs(cross) <= tol * max(seg, 1.0))
                    & (px >= min(ax, bx) - tol)
                    & (px <= max(ax, bx) + tol)
                    & (py >= min(ay, by) - tol)
                    & (py <= max(ay, by) + tol)
                )
    return inside | on_edge


def point_in_polygon(p, poly: Polygon | Sequence[Polygon]) -> bool:
    return bool(points_in_polygon([tuple(p)], poly)[0])


# ------------------------------------------------------------------- GeoJSON


_FEATURES_RE = re.compile(r'"features"\s*:\s*\[')


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def _feature_offsets(text: str, n_features: int) -> list[int]:
    m = _FEATURES_RE.search(text)
    if m is None:
        return [0] * n_features
    dec = json.JSONDecoder()
    pos = m.end()
    offsets = []
    try:
        for _ in range(n_features):
            while text[pos] in " \t\r\n,":
                pos += 1
            offsets.append(pos)
            _, pos = dec.raw_decode(text, pos)
    except (json.JSONDecodeError, IndexError):
        return [m.start()] * n_features
    return offsets


def _parse_polygons(geom, where: str) -> list[Polygon]:
    if not isinstance(geom, dict) or "type" not in geom or "coordinates" not in geom:
        raise ValueError(f"{where}: geometry must have 'type' and 'coordinates'")
    kind, coords = geom["type"], geom["coordinates"]
    if kind == "Polygon":
        parts = [coords]
    elif kind == "MultiPolygon":
        parts = coords
    else:
        raise ValueError(f"{where}: unsupported geometry type {kind!r}")
    out = []
    for rings in parts:
        if not rings:
            raise ValueError(f"{where}: polygon without rings")
        for ring in rings:
            if len(ring) < 4 or list(ring[0]) != list(ring[-1]):
                raise ValueError(f"{where}: ring is not closed")
        poly = Polygon.from_coords(rings[0], rings[1:])
        if not poly.to_shapely().is_valid:
            raise ValueError(f"{where}: polygon is self-intersecting or otherwise invalid")
        out.append(poly)
    return out


def read_geojson(path: str | Path) -> tuple[dict, list[tuple[dict, list[Polygon]]]]:
    """Parse a FeatureCollection into ``(header, [(properties, polygons), ...])``.

    Any structural or geometric defect raises ``GeometryParseError`` carrying the
    byte offset of the offending feature (or of the JSON syntax error).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeometryParseError(exc.msg, path, _byte_offset(text, exc.pos)) from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise GeometryParseError("expected a GeoJSON FeatureCollection", path, 0)
    feats = doc.get("features")
    if not isinstance(feats, list):
        raise GeometryParseError("FeatureCollection has no 'features' array", path, 0)
    offsets = _feature_offsets(text, len(feats))
    header = {k: v for k, v in doc.items() if k != "features"}
    out = []
    for i, feat in enumerate(feats):
        off = _byte_offset(text, offsets[i])
        try:
            if not isinstance(feat, dict) or feat.get("type") != "Feature":
                raise ValueError(f"feature {i} is not a Feature")
            props = feat.get("properties") or {}
            polys = _parse_polygons(feat.get("geometry"), f"feature {i}")
        except (ValueError, TypeError) as exc:
            raise GeometryParseError(str(exc), path, off) from None
        out.append((props, polys))
    return header, out


def _crs_note(header: dict) -> str | None:
    if "crs_note" in header:
        return header["crs_note"]
    return (header.get("properties") or {}).get("crs_note")


def write_geojson(path: str | Path, features: Iterable[tuple[dict, Sequence[Polygon]]], crs_note: str | None = None) -> None:
    feats = []
    for props, polys in features:
        rings = [
            [_closed(p.exterior)] + [_closed(h) for h in p.holes]
            for p in polys
        ]
        geom = {"type": "Polygon", "coordinates": rings[0]} if len(rings) == 1 else {
            "type": "MultiPolygon", "coordinates": rings}
        feats.append({"type": "Feature", "properties": props, "geometry": geom})
    doc: dict = {"type": "FeatureCollection"}
    if crs_note is not None:
        doc["crs_note"] = crs_note
    doc["features"] = feats
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _closed(ring: np.ndarray) -> list[list[float]]:
    pts = [[float(x), float(y)] for x, y in ring]
    return pts + [pts[0]]


# ------------------------------------------------------------------- loading


def _number(value: str, what: str) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise DatasetError(f"{what}: not a number: {value!r}") from None
    if not math.isfinite(x):
        raise DatasetError(f"{what}: not finite: {value!r}")
    return x


def _read_csv(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def load_regions(region_file: str | Path) -> list[Region]:
    header, feats = read_geojson(region_file)
    if _crs_note(header) is None:
        log.warning("%s: no crs_note in header; coordinates are assumed planar", region_file)
    regions, seen = [], set()
    for props, polys in feats:
        rid = props.get("id")
        if rid is None:
            raise DatasetError(f"{region_file}: region feature without 'id' property")
        rid = str(rid)
        if rid in seen:
            raise DatasetError(f"{region_file}: duplicate region id {rid!r}")
        seen.add(rid)
        regions.append(Region(id=rid, boundary=tuple(polys), split=str(props.get("split", "train"))))
    return regions


def load_landuse(landuse_file: str | Path) -> LandUseMap:
    _, feats = read_geojson(landuse_file)
    patches, classes = [], []
    for props, polys in feats:
        cls = props.get("class")
        if cls is None:
            raise DatasetError(f"{landuse_file}: land-use feature without 'class' property")
        cls = str(cls)
        if cls not in classes:
            classes.append(cls)
        patches.extend((p, cls) for p in polys)
    return LandUseMap(patches=patches, class_set=classes)


def load_indicators(indicators_file: str | Path, regions: list[Region]) -> None:
    """Attach population, GVA and total volume to ``regions`` in place."""
    fields, rows = _read_csv(Path(indicators_file))
    required = ["region_id", "population", "total_volume"]
    missing = [c for c in required if c not in fields]
    if missing:
        raise DatasetError(f"{indicators_file}: missing columns {missing}")
    gva_cols = [c for c in fields if c.startswith("gva_")]
    by_id = {r.id: r for r in regions}
    seen = set()
    for row in rows:
        rid = row["region_id"]
        if rid not in by_id:
            raise DatasetError(f"{indicators_file}: indicator row for unknown region {rid!r}")
        if rid in seen:
            raise DatasetError(f"{indicators_file}: duplicate indicator row for region {rid!r}")
        seen.add(rid)
        reg = by_id[rid]
        reg.population = _number(row["population"], f"{rid}.population")
        reg.total_volume = _number(row["total_volume"], f"{rid}.total_volume")
        reg.gva = {c[4:]: _number(row[c], f"{rid}.{c}") for c in gva_cols}
        for name in reg.indicator_names() + ["total_volume"]:
            value = reg.total_volume if name == "total_volume" else reg.indicator(name)
            if value < 0:
                raise DatasetError(f"{indicators_file}: negative {name} for region {rid!r}")
    for reg in regions:
        if reg.id not in seen:
            raise DatasetError(f"{indicators_file}: missing indicator row for region {reg.id!r}")


def load_facilities(facilities_file: str | Path, regions: list[Region]) -> list[Facility]:
    path = Path(facilities_file)
    if path.stat().st_size == 0:
        return []
    fields, rows = _read_csv(path)
    missing = [c for c in ("id", "region_id", "x", "y") if c not in fields]
    if missing:
        raise DatasetError(f"{path}: missing columns {missing}")
    by_id = {r.id: r for r in regions}
    out = []
    for row in rows:
        fid = row["id"]
        loc = GeoPoint(_number(row["x"], f"{fid}.x"), _number(row["y"], f"{fid}.y"))
        reg = by_id.get(row["region_id"])
        if reg is None:
            raise DatasetError(f"{path}: facility {fid!r} references unknown region {row['region_id']!r}")
        if not point_in_polygon(loc, reg.boundary):
            owner = next((r.id for r in regions if point_in_polygon(loc, r.boundary)), None)
            where = f"inside region {owner!r}" if owner else "outside all regions"
            raise DatasetError(f"{path}: facility {fid!r} lies {where}, not in region {reg.id!r}")
        truth = None
        raw = row.get("ground_truth_demand")
        if raw not in (None, ""):
            truth = _number(raw, f"{fid}.ground_truth_demand")
            if truth < 0:
                raise DatasetError(f"{path}: facility {fid!r} has negative ground truth")
        out.append(Facility(id=fid, location=loc, region_id=reg.id, ground_truth_demand=truth))
    return out


def load_dataset(region_file, landuse_file, indicators_file, facilities_file):
    """Load the four input files; returns ``(regions, landuse, facilities)``."""
    for p in (region_file, landuse_file, indicators_file, facilities_file):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    regions = load_regions(region_file)
    landuse = load_landuse(landuse_file)
    load_indicators(indicators_file, regions)
    facilities = load_facilities(facilities_file, regions)
    return regions, landuse, facilities


# ---------------------------------------------------------------------- grid


def cell_side(bbox_area: float, target_cell_count: int, quantum: float | None = 1.0) -> float:
    side = math.sqrt(bbox_area / target_cell_count)
    if quantum:
        side = max(quantum, round(side / quantum) * quantum)
    return side


def class_coverage(landuse: LandUseMap, clip=None) -> list:
    """Per-class shapely coverage, with earlier classes claiming overlaps first."""
    claimed = None
    out = []
    for cls in landuse.class_set:
        geoms = [p.to_shapely() for p, c in landuse.patches if c == cls]
        if clip is not None:
            geoms = [g for g in geoms if g.intersects(clip)]
        geom = shapely.union_all(geoms) if geoms else shapely.Polygon()
        if clip is not None and not geom.is_empty:
            geom = geom.intersection(clip)
        if claimed is not None and not geom.is_empty:
            geom = geom.difference(claimed)
        out.append(geom)
        if not geom.is_empty:
            claimed = geom if claimed is None else claimed.union(geom)
    return out


def dominant_onehot(fractions: np.ndarray) -> np.ndarray:
    """One-hot at the first maximal entry (row-wise for 2-D input)."""
    f = np.atleast_2d(fractions)
    hot = np.zeros_like(f)
    if f.shape[1]:
        hot[np.arange(len(f)), np.argmax(f, axis=1)] = 1.0
    return hot if np.ndim(fractions) == 2 else hot[0]


def generate_grid(region: Region, landuse: LandUseMap, target_cell_count: int,
                  quantum: float | None = 1.0) -> list[GridCell]:
    """Rasterise ``region`` into square cells whose centroids fall inside it.

    Side length is ``sqrt(bbox area / target)`` rounded to ``quantum``
    (``None`` or 0 disables rounding).  Land-use fractions are exact
    intersection areas over the full cell area.
    """
    if target_cell_count < 1:
        raise ValueError("target_cell_count must be >= 1")
    area = sum(p.to_shapely().area for p in region.boundary)
    minx, miny, maxx, maxy = boundary_bounds(region.boundary)
    bbox_area = (maxx - minx) * (maxy - miny)
    if area <= 0 or bbox_area <= 0:
        raise ValueError(f"region {region.id!r} has zero area")
    side = cell_side(bbox_area, target_cell_count, quantum)
    nx = max(1, math.ceil((maxx - minx) / side - 1e-9))
    ny = max(1, math.ceil((maxy - miny) / side - 1e-9))
    cols, rows = np.meshgrid(np.arange(nx), np.arange(ny))
    rows, cols = rows.ravel(), cols.ravel()
    cx = minx + (cols + 0.5) * side
    cy = miny + (rows + 0.5) * side
    keep = points_in_polygon(np.column_stack([cx, cy]), region.boundary)
    rows, cols, cx, cy = rows[keep], cols[keep], cx[keep], cy[keep]

    half = side / 2.0
    boxes = shapely.box(cx - half, cy - half, cx + half, cy + half)
    fractions = np.zeros((len(boxes), len(landuse.class_set)))
    if len(boxes):
        extent = shapely.box(cx.min() - half, cy.min() - half, cx.max() + half, cy.max() + half)
        tree = shapely.STRtree(boxes)
        for k, geom in enumerate(class_coverage(landuse, clip=extent)):
            if geom.is_empty:
                continue
            idx = tree.query(geom, predicate="intersects")
            if len(idx):
                idx = np.sort(idx)
                fractions[idx, k] = shapely.area(shapely.intersection(boxes[idx], geom)) / (side * side)
    np.clip(fractions, 0.0, 1.0, out=fractions)
    hot = dominant_onehot(fractions)
    return [
        GridCell(
            id=f"{region.id}:{r}:{c}",
            region_id=region.id,
            centroid=GeoPoint(float(x), float(y)),
            side=side,
            fractions=fractions[i],
            dominant_onehot=hot[i],
            row=int(r),
            col=int(c),
        )
        for i, (r, c, x, y) in enumerate(zip(rows, cols, cx, cy))
    ]


def generate_grids(regions: Sequence[Region], landuse: LandUseMap, target_cell_count: int,
                   quantum: float | None = 1.0) -> list[GridCell]:
    cells: list[GridCell] = []
    for reg in regions:
        cells.extend(generate_grid(reg, landuse, target_cell_count, quantum))
    return cells


# -------------------------------------------------------------- cell storage


def write_cells(path: str | Path, cells: Sequence[GridCell], class_set: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "region_id", "row", "col", "x", "y", "side"] + [f"frac_{c}" for c in class_set])
        for c in cells:
            w.writerow([c.id, c.region_id, c.row, c.col, repr(c.centroid.x), repr(c.centroid.y), repr(c.side)]
                       + [repr(float(f)) for f in c.fractions])


def read_cells(path: str | Path) -> tuple[list[GridCell], list[str]]:
    fields, rows = _read_csv(Path(path))
    classes = [f[5:] for f in fields if f.startswith("frac_")]
    cells = []
    for row in rows:
        fr = np.array([float(row[f"frac_{c}"]) for c in classes])
        cells.append(GridCell(
            id=row["cell_id"], region_id=row["region_id"],
            centroid=GeoPoint(float(row["x"]), float(row["y"])), side=float(row["side"]),
            fractions=fr, dominant_onehot=dominant_onehot(fr),
            row=int(row["row"]), col=int(row["col"]),
        ))
    return cells, classes
