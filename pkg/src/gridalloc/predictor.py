"""Edge weights from embeddings: gated distance cost, then softmax per source."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, encode_tensors
from .graph import HeteroGraph

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.5


@dataclass(eq=False)
class PredictorParams:
    d: int
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def predictor_shapes(d: int) -> dict[str, tuple[int, int]]:
    return {"gate.w1": (2 * d, d), "gate.b1": (1, d), "gate.w2": (d, 1), "gate.b2": (1, 1)}


def init_predictor(d: int = 64, seed: int = 0) -> PredictorParams:
    rng = np.random.default_rng([seed, 1])
    tensors = {}
    for name, shape in predictor_shapes(d).items():
        fan_in = shape[0] if name.endswith(("w1", "w2")) else {"gate.b1": 2 * d, "gate.b2": d}[name]
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return PredictorParams(d, seed, tensors)


@dataclass(eq=False)
class EdgeWeightField:
    weights: np.ndarray  # aligned with the graph's edges_sa
    tau: float
    groups: np.ndarray  # source index per edge
    agents: np.ndarray | None = None  # agent index per edge

    def per_agent(self, n_agents: int) -> np.ndarray:
        """Weights scattered onto agents (each agent has one source)."""
        out = np.zeros(n_agents)
        agents = self.agents if self.agents is not None else np.arange(len(self.weights))
        np.add.at(out, agents, self.weights)
        return out

    def group_sums(self, n_groups: int | None = None) -> np.ndarray:
        n = int(self.groups.max()) + 1 if n_groups is None else n_groups
        return np.bincount(self.groups, weights=self.weights, minlength=n)


def relation_cost_tensor(hs_e: ad.Tensor, ha_e: ad.Tensor, P: dict[str, ad.Tensor]) -> ad.Tensor:
    """``sigmoid(MLP([h_s || h_a])) * ||h_s - h_a||`` per edge, ``[E x 1]``."""
    x = ad.concat_cols([hs_e, ha_e])
    hidden = ad.relu(ad.add(ad.matmul(x, P["gate.w1"]), P["gate.b1"]))
    gate = ad.sigmoid(ad.add(ad.matmul(hidden, P["gate.w2"]), P["gate.b2"]))
    return ad.mul(gate, ad.row_l2_distance(hs_e, ha_e))


def relation_cost(H_s: np.ndarray, H_a: np.ndarray, edges: np.ndarray, params: PredictorParams) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    tape = ad.Tape()
    P = {k: tape.constant(v) for k, v in params.tensors.items()}
    hs_e = tape.constant(np.asarray(H_s, dtype=np.float64)[edges[:, 0]])
    ha_e = tape.constant(np.asarray(H_a, dtype=np.float64)[edges[:, 1]])
    return relation_cost_tensor(hs_e, ha_e, P).data[:, 0]


def grouped_softmax(costs, groups, tau: float = DEFAULT_TAU, n_groups: int | None = None) -> EdgeWeightField:
    """Per-group ``exp(-c/tau)`` normalisation of edge costs."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    costs = np.asarray(costs, dtype=np.float64).reshape(-1)
    groups = np.asarray(groups, dtype=np.intp).reshape(-1)
    n = (int(groups.max()) + 1 if len(groups) else 0) if n_groups is None else n_groups
    counts = np.bincount(groups, minlength=n)
    for s in np.flatnonzero(counts == 0):
        log.warning("group %d has no edges; skipped", s)
    tape = ad.Tape()
    w = ad.grouped_neg_softmax(tape.constant(costs[:, None]), groups, n, tau)
    return EdgeWeightField(w.data[:, 0], tau, groups)


def weights_tensor(tape: ad.Tape, g: HeteroGraph, enc: EncoderParams, W: dict[str, ad.Tensor],
                   P: dict[str, ad.Tensor], tau: float) -> ad.Tensor:
    """Edge weights ``[E x 1]`` recorded on ``tape``."""
    hs, ha = encode_tensors(tape, g, enc, W)
    hs_e = ad.gather_rows(hs, g.edge_sources)
    ha_e = ad.gather_rows(ha, g.edge_agents)
    cost = relation_cost_tensor(hs_e, ha_e, P)
    return ad.grouped_neg_softmax(cost, g.edge_sources, g.n_sources, tau)


def predict_weights(g: HeteroGraph, encoder_params: EncoderParams, predictor_params: PredictorParams,
                    tau: float = DEFAULT_TAU) -> EdgeWeightField:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if predictor_params.d != encoder_params.d:
        raise ValueError(f"predictor width {predictor_params.d} != encoder width {encoder_params.d}")
    tape = ad.Tape()
    W = {k: tape.constant(v) for k, v in encoder_params.tensors.items()}
    P = {k: tape.constant(v) for k, v in predictor_params.tensors.items()}
    if g.edges_sa.shape[0] == 0:
        return EdgeWeightField(np.zeros(0), tau, g.edge_sources.copy(), g.edge_agents.copy())
    w = weights_tensor(tape, g, encoder_params, W, P, tau)
    return EdgeWeightField(w.data[:, 0].copy(), tau, g.edge_sources.copy(), g.edge_agents.copy())


# -------------------------------------------------------------------- output


def write_weights_csv(path: str | Path, g: HeteroGraph, field_: EdgeWeightField) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "agent_id", "weight"])
        for s, a, x in zip(field_.groups, field_.agents, field_.weights):
            w.writerow([g.source_ids[s], g.agent_ids[a], repr(float(x))])


def read_weights_csv(path: str | Path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["agent_id"]: float(row["weight"]) for row in csv.DictReader(fh)}


def write_heatmap_pgm(path: str | Path, rows: Sequence[int], cols: Sequence[int], values: Sequence[float]) -> None:
    """Binary 8-bit PGM with one pixel per grid cell, north up; empty pixels are 0."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    values = np.asarray(values, dtype=np.float64)
    h, w = int(rows.max()) + 1, int(cols.max()) + 1
    img = np.zeros((h, w), dtype=np.uint8)
    top = values.max() if values.size and values.max() > 0 else 1.0
    img[h - 1 - rows, cols] = np.round(255 * values / top).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
