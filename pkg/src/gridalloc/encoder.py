"""Heterogeneous attention encoder over the region/cell graph.

Each node type is first projected into a shared ``d``-dimensional space.  Every
layer then runs, for both relations, multi-head scaled dot-product attention
from target nodes over their typed neighbours with relation-specific
query/key/value/output matrices.  Both relations read the previous layer's
activations.  The update for a target of type ``t`` is::

    m  = Attn_r(H)                       # [n_t x d]
    H' = H + scale_t * (m + relu((H + m) @ ff_t))

Nodes without neighbours keep ``H`` unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import HeteroGraph

RELATIONS = ("sa", "as")  # sa: sources -> agents, as: agents -> sources
CHECKPOINT_FORMAT = "gridalloc.checkpoint/1"


@dataclass(eq=False)
class EncoderParams:
    d: int
    heads: int
    layers: int
    d_source: int
    d_agent: int
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}


def encoder_shapes(d: int, heads: int, layers: int, d_source: int, d_agent: int) -> dict[str, tuple[int, int]]:
    shapes = {"proj.source": (d_source, d), "proj.agent": (d_agent, d)}
    for l in range(layers):
        for r in RELATIONS:
            for m in ("q", "k", "v", "o"):
                shapes[f"layer{l}.{r}.{m}"] = (d, d)
        for t in ("source", "agent"):
            shapes[f"layer{l}.ff.{t}"] = (d, d)
            shapes[f"layer{l}.scale.{t}"] = (1, d)
    return shapes


def init_params(d: int = 64, heads: int = 4, layers: int = 2, seed: int = 0, *,
                d_source: int, d_agent: int) -> EncoderParams:
    if heads < 1 or d % heads:
        raise ValueError(f"latent dim {d} is not divisible by {heads} heads")
    if layers < 1:
        raise ValueError("need at least one layer")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in encoder_shapes(d, heads, layers, d_source, d_agent).items():
        if ".scale." in name:
            tensors[name] = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(d, heads, layers, d_source, d_agent, seed, tensors)


def _head_sum(d: int, heads: int) -> np.ndarray:
    """``[d x H]`` indicator summing each head's block of columns."""
    m = np.zeros((d, heads))
    for h in range(heads):
        m[h * (d // heads):(h + 1) * (d // heads), h] = 1.0
    return m


def attention(H_dst: ad.Tensor, H_src: ad.Tensor, src_idx: np.ndarray, dst_idx: np.ndarray,
              W: dict[str, ad.Tensor], heads: int) -> tuple[ad.Tensor, ad.Tensor]:
    """Aggregated output ``[n_dst x d]`` and per-edge attention ``[E x H]``."""
    d = H_dst.shape[1]
    n_dst = H_dst.shape[0]
    hs = _head_sum(d, heads)
    q = ad.gather_rows(ad.matmul(H_dst, W["q"]), dst_idx)
    k = ad.gather_rows(ad.matmul(H_src, W["k"]), src_idx)
    v = ad.gather_rows(ad.matmul(H_src, W["v"]), src_idx)
    scores = ad.scale(ad.matmul(ad.mul(q, k), hs), 1.0 / math.sqrt(d // heads))
    att = ad.grouped_softmax(scores, dst_idx, n_dst)
    msg = ad.mul(ad.matmul(att, hs.T), v)
    agg = ad.segment_sum(msg, dst_idx, n_dst)
    return ad.matmul(agg, W["o"]), att


def bind(tape: ad.Tape, tensors: dict[str, np.ndarray], prefix: str = "") -> dict[str, ad.Tensor]:
    return {k: tape.variable(v, name=prefix + k) for k, v in tensors.items()}


def encode_tensors(tape: ad.Tape, g: HeteroGraph, params: EncoderParams, W: dict[str, ad.Tensor],
                   attn_out: list | None = None) -> tuple[ad.Tensor, ad.Tensor]:
    if g.source_features.shape[1] != params.d_source or g.agent_features.shape[1] != params.d_agent:
        raise ad.ShapeError(
            f"feature widths ({g.source_features.shape[1]}, {g.agent_features.shape[1]}) do not match "
            f"projections ({params.d_source}, {params.d_agent})")
    H = {
        "source": ad.matmul(tape.constant(g.source_features), W["proj.source"]),
        "agent": ad.matmul(tape.constant(g.agent_features), W["proj.agent"]),
    }
    s_idx, a_idx = g.edge_sources, g.edge_agents
    has_nb = {
        "source": np.bincount(s_idx, minlength=g.n_sources) > 0,
        "agent": np.bincount(a_idx, minlength=g.n_agents) > 0,
    }
    # relation -> (source type, target type, source index per edge, target index per edge)
    wiring = {"sa": ("source", "agent", s_idx, a_idx), "as": ("agent", "source", a_idx, s_idx)}
    for l in range(params.layers):
        new = dict(H)
        for r in RELATIONS:
            src_t, dst_t, src_i, dst_i = wiring[r]
            if len(src_i) == 0:
                continue
            Wr = {m: W[f"layer{l}.{r}.{m}"] for m in ("q", "k", "v", "o")}
            msg, att = attention(H[dst_t], H[src_t], src_i, dst_i, Wr, params.heads)
            if attn_out is not None:
                attn_out.append((l, r, att.data, dst_i))
            z = ad.add(H[dst_t], msg)
            upd = ad.mul(ad.add(msg, ad.relu(ad.matmul(z, W[f"layer{l}.ff.{dst_t}"]))),
                         W[f"layer{l}.scale.{dst_t}"])
            if not has_nb[dst_t].all():
                upd = ad.mul(upd, has_nb[dst_t][:, None].astype(np.float64))
            new[dst_t] = ad.add(H[dst_t], upd)
        H = new
    return H["source"], H["agent"]


def encode(g: HeteroGraph, params: EncoderParams, return_attention: bool = False):
    """Node embeddings ``(H_s, H_a)`` as plain arrays."""
    tape = ad.Tape()
    W = {k: tape.constant(v) for k, v in params.tensors.items()}
    attn: list = []
    hs, ha = encode_tensors(tape, g, params, W, attn)
    if return_attention:
        return hs.data, ha.data, attn
    return hs.data, ha.data


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, enc: EncoderParams, pred, extra: dict | None = None) -> None:
    """JSON checkpoint with a shape manifest; floats are written round-trip exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "encoder": {
            "d": enc.d, "heads": enc.heads, "layers": enc.layers,
            "d_source": enc.d_source, "d_agent": enc.d_agent, "seed": enc.seed,
        },
        "predictor": {"d": pred.d, "seed": pred.seed},
        "manifest": {
            **{f"encoder/{k}": list(v.shape) for k, v in enc.tensors.items()},
            **{f"predictor/{k}": list(v.shape) for k, v in pred.tensors.items()},
        },
        "tensors": {
            **{f"encoder/{k}": v.ravel().tolist() for k, v in enc.tensors.items()},
            **{f"predictor/{k}": v.ravel().tolist() for k, v in pred.tensors.items()},
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


class CheckpointMismatch(ValueError):
    pass


def load_checkpoint(path: str | Path, expect: dict | None = None):
    """Load ``(EncoderParams, PredictorParams, extra)``.

    ``expect`` may pin any of ``d``, ``heads``, ``layers``, ``d_source``,
    ``d_agent``; a disagreement or a manifest/shape mismatch is refused.
    """
    from .predictor import PredictorParams, predictor_shapes

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: not a {CHECKPOINT_FORMAT} file")
    e = doc["encoder"]
    for key, want in (expect or {}).items():
        if e.get(key) != want:
            raise CheckpointMismatch(f"{path}: checkpoint has {key}={e.get(key)}, configuration needs {want}")
    enc_shapes = encoder_shapes(e["d"], e["heads"], e["layers"], e["d_source"], e["d_agent"])
    pred_shapes = predictor_shapes(doc["predictor"]["d"])
    wanted = {**{f"encoder/{k}": list(v) for k, v in enc_shapes.items()},
              **{f"predictor/{k}": list(v) for k, v in pred_shapes.items()}}
    if doc["manifest"] != wanted:
        raise CheckpointMismatch(f"{path}: shape manifest does not match the declared architecture")
    arrays = {}
    for k, shape in wanted.items():
        flat = np.array(doc["tensors"][k], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise CheckpointMismatch(f"{path}: tensor {k} has {flat.size} values, manifest says {shape}")
        arrays[k] = flat.reshape(shape)
    enc = EncoderParams(e["d"], e["heads"], e["layers"], e["d_source"], e["d_agent"], e["seed"],
                        {k: arrays[f"encoder/{k}"] for k in enc_shapes})
    pred = PredictorParams(doc["predictor"]["d"], doc["predictor"]["seed"],
                           {k: arrays[f"predictor/{k}"] for k in pred_shapes})
    return enc, pred, doc.get("extra", {})
