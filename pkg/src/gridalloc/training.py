"""Self-supervised training: indicator shares are reconstructed from weighted land use."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, bind, init_params
from .geo import GridCell, Region
from .graph import HeteroGraph
from .predictor import PredictorParams, init_predictor, weights_tensor

log = logging.getLogger(__name__)

DEFAULT_MAPPING = (
    ("population", "residential"),
    ("gva_industry", "industrial"),
    ("gva_commerce", "commercial"),
    ("gva_agriculture", "agricultural"),
)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(eq=False)
class CategoryMapping:
    """Indicator -> land-use class pairs; unmapped classes share a residual bucket."""

    pairs: list[tuple[str, str]]
    class_set: list[str]

    def __post_init__(self):
        self.pairs = [(str(i), str(c)) for i, c in self.pairs]
        classes = [c for _, c in self.pairs]
        if len(set(classes)) != len(classes):
            raise ValueError(f"mapping is not injective: {classes}")
        if len({i for i, _ in self.pairs}) != len(self.pairs):
            raise ValueError("an indicator is mapped twice")
        missing = [c for c in classes if c not in self.class_set]
        if missing:
            raise ValueError(f"mapped classes {missing} not in land-use classes {self.class_set}")

    @property
    def indicators(self) -> list[str]:
        return [i for i, _ in self.pairs]

    @property
    def n_buckets(self) -> int:
        return len(self.pairs) + 1

    @property
    def residual_classes(self) -> list[str]:
        mapped = {c for _, c in self.pairs}
        return [c for c in self.class_set if c not in mapped]

    def bucket_of_class(self) -> np.ndarray:
        """Bucket index for each class in ``class_set`` order."""
        where = {c: k for k, (_, c) in enumerate(self.pairs)}
        return np.array([where.get(c, len(self.pairs)) for c in self.class_set], dtype=np.intp)

    def class_to_bucket_matrix(self) -> np.ndarray:
        m = np.zeros((len(self.class_set), self.n_buckets))
        m[np.arange(len(self.class_set)), self.bucket_of_class()] = 1.0
        return m


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    tau: float = 0.5
    d: int = 64
    heads: int = 4
    layers: int = 2
    epsilon_smooth: float = 1e-8
    patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("learning_rate", "tau", "d", "heads", "layers"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.patience < 0 or self.epsilon_smooth < 0:
            raise ValueError("epochs, patience and epsilon_smooth must be non-negative")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TargetDistribution:
    P: np.ndarray  # [S x (K+1)], residual column last
    active: np.ndarray  # bool per source
    region_ids: list[str] = field(default_factory=list)


def build_targets(regions: Sequence[Region], mapping: CategoryMapping) -> TargetDistribution:
    S, K = len(regions), mapping.n_buckets
    P = np.zeros((S, K))
    active = np.zeros(S, dtype=bool)
    for s, reg in enumerate(regions):
        raw = np.array([reg.indicator(i) for i in mapping.indicators], dtype=np.float64)
        tot = raw.sum()
        if not tot > 0:
            log.warning("region %r has all-zero mapped indicators; excluded from the loss", reg.id)
            continue
        P[s, :-1] = raw / tot
        active[s] = True
    return TargetDistribution(P, active, [r.id for r in regions])


def bucket_onehots(cells: Sequence[GridCell], mapping: CategoryMapping) -> np.ndarray:
    """``T_a`` regrouped into mapping buckets, ``[n_a x (K+1)]``."""
    if not cells:
        return np.zeros((0, mapping.n_buckets))
    hot = np.vstack([c.dominant_onehot for c in cells])
    return hot @ mapping.class_to_bucket_matrix()


def reconstruct(weights, cells: Sequence[GridCell], mapping: CategoryMapping,
                n_sources: int | None = None) -> np.ndarray:
    """``P_hat[s] = sum_a w_sa T_a`` over each source's edges."""
    T = bucket_onehots(cells, mapping)
    groups = np.asarray(weights.groups, dtype=np.intp)
    agents = weights.agents if weights.agents is not None else np.arange(len(weights.weights))
    n = (int(groups.max()) + 1 if len(groups) else 0) if n_sources is None else n_sources
    out = np.zeros((n, mapping.n_buckets))
    np.add.at(out, groups, weights.weights[:, None] * T[agents])
    return out


def smooth(Q: np.ndarray, eps: float) -> np.ndarray:
    K = Q.shape[-1]
    return (Q + eps) / (1.0 + K * eps)


def loss(P: np.ndarray, P_hat: np.ndarray, epsilon_smooth: float = 1e-8) -> float:
    """``sum_s KL(P_s || smooth(P_hat_s))`` with ``0 ln 0 = 0``."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = smooth(np.atleast_2d(np.asarray(P_hat, dtype=np.float64)), epsilon_smooth)
    support = P > 0
    return float(np.sum(P[support] * (np.log(P[support]) - np.log(Q[support]))))


def loss_tensor(tape: ad.Tape, w: ad.Tensor, g: HeteroGraph, T: np.ndarray, targets: TargetDistribution,
                eps: float) -> ad.Tensor:
    K = T.shape[1]
    contrib = ad.mul(tape.constant(T[g.edge_agents]), w)  # [E x K] * [E x 1]
    p_hat = ad.segment_sum(contrib, g.edge_sources, g.n_sources)
    q = ad.scale(ad.add(p_hat, np.array(eps)), 1.0 / (1.0 + K * eps))
    active = np.flatnonzero(targets.active & (g.neighborhood_sizes() > 0))
    return ad.kl_div(targets.P[active], ad.gather_rows(q, active))


def model_loss(g: HeteroGraph, T: np.ndarray, targets: TargetDistribution, enc: EncoderParams,
               pred: PredictorParams, tau: float, eps: float, tape: ad.Tape | None = None):
    """Full forward pass; returns ``(loss tensor, tape, encoder vars, predictor vars)``."""
    tape = tape or ad.Tape()
    W = bind(tape, enc.tensors, "encoder/")
    Pv = bind(tape, pred.tensors, "predictor/")
    w = weights_tensor(tape, g, enc, W, Pv, tau)
    return loss_tensor(tape, w, g, T, targets, eps), tape, W, Pv


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k in params:
            params[k] -= self.lr * grads[k]


def train(g: HeteroGraph, cells: Sequence[GridCell], regions: Sequence[Region], config: TrainConfig,
          mapping: CategoryMapping) -> tuple[EncoderParams, PredictorParams, list[float]]:
    """Full-batch minimisation of the summed KL loss.

    ``regions`` and ``cells`` must be aligned with the graph's sources and
    agents.  Returns the parameters with the lowest recorded loss and the
    per-epoch loss trace (loss evaluated before that epoch's update).
    """
    if [r.id for r in regions] != list(g.source_ids):
        raise ValueError("regions are not aligned with graph sources")
    if len(cells) != g.n_agents:
        raise ValueError("cells are not aligned with graph agents")
    enc = init_params(config.d, config.heads, config.layers, config.seed,
                      d_source=g.source_features.shape[1], d_agent=g.agent_features.shape[1])
    pred = init_predictor(config.d, config.seed)
    targets = build_targets(regions, mapping)
    T = bucket_onehots(cells, mapping)
    trace: list[float] = []
    if config.epochs == 0:
        return enc, pred, trace

    params = {**{f"encoder/{k}": v.copy() for k, v in enc.tensors.items()},
              **{f"predictor/{k}": v.copy() for k, v in pred.tensors.items()}}
    opt = Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)
    best_loss, best, since_best = np.inf, None, 0
    for epoch in range(config.epochs):
        cur_enc = _with(enc, params, "encoder/")
        cur_pred = _with(pred, params, "predictor/")
        try:
            L, tape, W, Pv = model_loss(g, T, targets, cur_enc, cur_pred, config.tau, config.epsilon_smooth)
            grads_by_tensor = tape.backward(L)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}") from None
        value = float(L.data)
        trace.append(value)
        log.debug("epoch %d loss %.6g", epoch, value)
        if value < best_loss:
            best_loss, since_best = value, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            since_best += 1
            if config.patience and since_best >= config.patience:
                log.info("early stop at epoch %d (best %.6g)", epoch, best_loss)
                break
        grads = {t.name: gval for t, gval in grads_by_tensor.items()}
        opt.step(params, grads)
    return _with(enc, best, "encoder/"), _with(pred, best, "predictor/"), trace


def _with(template, params: dict[str, np.ndarray], prefix: str):
    tensors = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    if isinstance(template, EncoderParams):
        return EncoderParams(template.d, template.heads, template.layers, template.d_source,
                             template.d_agent, template.seed, tensors)
    return PredictorParams(template.d, template.seed, tensors)


def write_trace(path: str | Path, trace: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, x in enumerate(trace):
            w.writerow([i, repr(float(x))])
