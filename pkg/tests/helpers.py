"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from gridalloc.geo import GeoPoint, GridCell, Polygon, Region, dominant_onehot
from gridalloc.graph import HeteroGraph

CLASSES = ["residential", "commercial", "industrial", "agricultural", "other"]


def square(x0, y0, side) -> Polygon:
    return Polygon.from_coords([(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)])


def make_cell(cid, rid, x, y, fractions, side=1.0, row=0, col=0) -> GridCell:
    fr = np.asarray(fractions, dtype=np.float64)
    return GridCell(cid, rid, GeoPoint(float(x), float(y)), side, fr, dominant_onehot(fr), row, col)


def random_world(rng: np.random.Generator, cells_per_region=(4, 6), n_classes=5, regions_gap=100.0):
    """Regions side by side with random cells; indicator values random but positive."""
    regions, cells = [], []
    for r, n in enumerate(cells_per_region):
        rid = f"R{r}"
        reg = Region(rid, (square(r * regions_gap, 0.0, 50.0),),
                     population=float(rng.uniform(10, 100)),
                     gva={"industry": float(rng.uniform(1, 50)), "commerce": float(rng.uniform(1, 50)),
                          "agriculture": float(rng.uniform(0, 20))},
                     total_volume=float(rng.uniform(10, 100)))
        regions.append(reg)
        for i in range(n):
            fr = rng.dirichlet(np.ones(n_classes)) * rng.uniform(0.7, 1.0)
            cells.append(make_cell(f"{rid}:{i}", rid, r * regions_gap + rng.uniform(1, 49),
                                   rng.uniform(1, 49), fr, row=i // 5, col=i % 5))
    return regions, cells


def random_graph(rng: np.random.Generator, n_sources: int, n_agents: int, d_source=4, d_agent=10) -> HeteroGraph:
    """Each agent hangs off one random source; every source keeps at least one agent when possible."""
    owner = rng.integers(0, n_sources, n_agents)
    owner[: min(n_sources, n_agents)] = np.arange(min(n_sources, n_agents))
    rng.shuffle(owner)
    edges = np.column_stack([owner, np.arange(n_agents)])
    return HeteroGraph(rng.uniform(0, 1, (n_sources, d_source)), rng.uniform(0, 1, (n_agents, d_agent)),
                       edges, [f"s{i}" for i in range(n_sources)], [f"a{i}" for i in range(n_agents)])
