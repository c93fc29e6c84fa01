"""Heterogeneous region/cell graph with bidirectional containment edges."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo import GridCell, Region, boundary_to_shapely

log = logging.getLogger(__name__)

GRAPH_FORMAT = "gridalloc.graph/1"


@dataclass(eq=False)
class FeatureSpec:
    source_layout: list[str]
    agent_layout: list[str]
    # per-source divisor used to turn raw indicators into shares
    source_totals: list[float] = field(default_factory=list)


@dataclass(eq=False)
class HeteroGraph:
    source_features: np.ndarray
    agent_features: np.ndarray
    edges_sa: np.ndarray  # [E x 2] (source, agent)
    source_ids: list[str]
    agent_ids: list[str]

    def __post_init__(self):
        self.edges_sa = np.asarray(self.edges_sa, dtype=np.intp).reshape(-1, 2)
        order = np.lexsort((self.edges_sa[:, 1], self.edges_sa[:, 0]))
        self._sorted = self.edges_sa[order]
        self._starts = np.searchsorted(self._sorted[:, 0], np.arange(self.n_sources + 1))

    @property
    def edges_as(self) -> np.ndarray:
        return self.edges_sa[:, ::-1].copy()

    @property
    def n_sources(self) -> int:
        return self.source_features.shape[0]

    @property
    def n_agents(self) -> int:
        return self.agent_features.shape[0]

    @property
    def edge_sources(self) -> np.ndarray:
        return self.edges_sa[:, 0]

    @property
    def edge_agents(self) -> np.ndarray:
        return self.edges_sa[:, 1]

    def neighborhood_sizes(self) -> np.ndarray:
        return np.diff(self._starts)


def neighborhood(g: HeteroGraph, source_index: int) -> list[int]:
    """Agents connected to ``source_index``, ascending."""
    if not 0 <= source_index < g.n_sources:
        raise IndexError(f"source index {source_index} out of range [0, {g.n_sources})")
    lo, hi = g._starts[source_index], g._starts[source_index + 1]
    return [int(a) for a in g._sorted[lo:hi, 1]]


def source_feature_matrix(regions: Sequence[Region]) -> tuple[np.ndarray, list[str], list[float]]:
    if not regions:
        return np.zeros((0, 0)), [], []
    names = regions[0].indicator_names()
    for r in regions[1:]:
        if r.indicator_names() != names:
            raise ValueError(f"region {r.id!r} has indicator set {r.indicator_names()}, expected {names}")
    raw = np.array([[r.indicator(n) for n in names] for r in regions], dtype=np.float64)
    totals = raw.sum(axis=1)
    safe = np.where(totals > 0, totals, 1.0)
    feats = np.where(totals[:, None] > 0, raw / safe[:, None], 0.0)
    return feats, [f"{n}_share" for n in names], totals.tolist()


def build_graph(regions: Sequence[Region], cells: Sequence[GridCell],
                class_set: Sequence[str] | None = None) -> tuple[HeteroGraph, FeatureSpec]:
    index = {r.id: i for i, r in enumerate(regions)}
    _warn_overlaps(regions)
    edges = np.empty((len(cells), 2), dtype=np.intp)
    for a, c in enumerate(cells):
        s = index.get(c.region_id)
        if s is None:
            raise KeyError(f"cell {c.id!r} references unknown region {c.region_id!r}")
        edges[a] = (s, a)
    src, src_layout, totals = source_feature_matrix(regions)
    n_classes = len(cells[0].fractions) if cells else len(class_set or [])
    if cells:
        agent = np.hstack([np.vstack([c.fractions for c in cells]),
                           np.vstack([c.dominant_onehot for c in cells])])
    else:
        agent = np.zeros((0, 2 * n_classes))
    names = list(class_set) if class_set is not None else [str(k) for k in range(n_classes)]
    agent_layout = [f"frac_{c}" for c in names] + [f"dominant_{c}" for c in names]
    g = HeteroGraph(src, agent, edges, [r.id for r in regions], [c.id for c in cells])
    for s, size in enumerate(g.neighborhood_sizes()):
        if size == 0:
            log.warning("region %r has no grid cells; it is excluded from the loss", g.source_ids[s])
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(agent))):
        raise ValueError("non-finite node features")
    return g, FeatureSpec(src_layout, agent_layout, totals)


def _warn_overlaps(regions: Sequence[Region]) -> None:
    if len(regions) < 2:
        return
    shapes = [boundary_to_shapely(r.boundary) for r in regions]
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            if shapes[i].intersection(shapes[j]).area > 0:
                log.warning("regions %r and %r overlap; cells keep the region that generated them",
                            regions[i].id, regions[j].id)


def subgraph(g: HeteroGraph, sources: Sequence[int]) -> HeteroGraph:
    """Restrict to ``sources`` and their agents, preserving relative order."""
    sources = sorted(int(s) for s in sources)
    remap_s = {s: i for i, s in enumerate(sources)}
    mask = np.isin(g.edge_sources, sources)
    agents = np.unique(g.edge_agents[mask])
    remap_a = np.full(g.n_agents, -1, dtype=np.intp)
    remap_a[agents] = np.arange(len(agents))
    e = g.edges_sa[mask]
    edges = np.column_stack([[remap_s[int(s)] for s in e[:, 0]], remap_a[e[:, 1]]]) if len(e) else np.zeros((0, 2))
    return HeteroGraph(
        g.source_features[sources], g.agent_features[agents], edges,
        [g.source_ids[s] for s in sources], [g.agent_ids[a] for a in agents],
    )


def dump_graph(path: str | Path, g: HeteroGraph, spec: FeatureSpec) -> None:
    doc = {
        "format": GRAPH_FORMAT,
        "n_sources": g.n_sources,
        "n_agents": g.n_agents,
        "source_layout": spec.source_layout,
        "agent_layout": spec.agent_layout,
        "source_totals": spec.source_totals,
        "source_ids": g.source_ids,
        "agent_ids": g.agent_ids,
        "edges_sa": g.edges_sa.tolist(),
        "edges_as": g.edges_as.tolist(),
        "source_features": g.source_features.tolist(),
        "agent_features": g.agent_features.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> tuple[HeteroGraph, FeatureSpec]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != GRAPH_FORMAT:
        raise ValueError(f"{path}: not a {GRAPH_FORMAT} file")
    src = np.array(doc["source_features"], dtype=np.float64).reshape(doc["n_sources"], -1)
    agt = np.array(doc["agent_features"], dtype=np.float64).reshape(doc["n_agents"], -1)
    if src.shape[1] != len(doc["source_layout"]) or agt.shape[1] != len(doc["agent_layout"]):
        raise ValueError(f"{path}: feature layouts do not match matrix widths")
    g = HeteroGraph(src, agt, np.array(doc["edges_sa"]), doc["source_ids"], doc["agent_ids"])
    return g, FeatureSpec(doc["source_layout"], doc["agent_layout"], doc["source_totals"])
