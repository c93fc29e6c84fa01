"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerics: these are slow, direct
restatements that the vectorised code is checked against.
"""

from __future__ import annotations

import math
from pathlib import Path

import mpmath
import numpy as np

FIXTURE = Path(__file__).parent / "data" / "fixture"


# ---------------------------------------------------------------- geometry


def winding_number(px: float, py: float, ring) -> int:
    """Signed winding number of an open ring around (px, py), Sunday's crossing rule."""
    wn = 0
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        cross = (x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)
        if y0 <= py:
            if y1 > py and cross > 0:
                wn += 1
        elif y1 <= py and cross < 0:
            wn -= 1
    return wn


def inside_by_winding(px: float, py: float, exterior, holes=()) -> bool:
    return winding_number(px, py, exterior) != 0 and all(winding_number(px, py, h) == 0 for h in holes)


def star_polygon(rng: np.random.Generator, n: int, center=(0.0, 0.0), r_min=0.3, r_max=1.0):
    """Random simple polygon: sorted angles, random radii around a centre."""
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(r_min, r_max, n)
    return [(center[0] + r * math.cos(a), center[1] + r * math.sin(a)) for a, r in zip(ang, rad)]


def rect_overlap(a, b) -> float:
    """Intersection area of two axis-aligned rectangles (x0, y0, x1, y1)."""
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0.0) * max(h, 0.0)


# --------------------------------------------------------------- partitions


def brute_nearest(points, targets) -> list[int]:
    """Exhaustive nearest scan; strict comparison keeps the lowest index on ties."""
    out = []
    for px, py in points:
        best, best_d = -1, math.inf
        for j, (tx, ty) in enumerate(targets):
            d = (px - tx) ** 2 + (py - ty) ** 2
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return out


def best_two_partition(points) -> frozenset:
    """Minimum within-cluster SSE split into two non-empty groups, by enumeration."""
    pts = [tuple(p) for p in points]
    n = len(pts)

    def sse(group):
        mx = sum(pts[i][0] for i in group) / len(group)
        my = sum(pts[i][1] for i in group) / len(group)
        return sum((pts[i][0] - mx) ** 2 + (pts[i][1] - my) ** 2 for i in group)

    best, best_val = None, math.inf
    for mask in range(1, 2 ** (n - 1)):
        a = [i for i in range(n) if mask >> i & 1]
        b = [i for i in range(n) if not mask >> i & 1]
        val = sse(a) + sse(b)
        if val < best_val:
            best, best_val = frozenset([frozenset(a), frozenset(b)]), val
    return best


# ----------------------------------------------------------------- numerics


def mp_neg_softmax(costs, tau, dps: int = 50) -> list:
    """exp(-c/tau) normalised, by direct summation at ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        e = [mpmath.e ** (-mpmath.mpf(c) / mpmath.mpf(tau)) for c in costs]
        s = mpmath.fsum(e)
        return [x / s for x in e]


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, one entry at a time."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradient_mismatch(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, abs_floor: float = 1e-8):
    """Entries failing ``|a-n| <= max(rel*max(|a|,|n|), abs_floor)``.

    Also returns the worst relative error among entries large enough for the
    relative bound to govern (``rel*scale > abs_floor``).
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = diff > np.maximum(rel * scale, abs_floor)
    governed = rel * scale > abs_floor
    worst = float(np.max(diff[governed] / scale[governed], initial=0.0))
    return np.flatnonzero(bad.reshape(-1)), worst


def fd_noise_floor(value: float, h: float = 1e-5) -> float:
    """Ten times the rounding error of a central difference of a function of size ``value``."""
    return 10 * np.finfo(np.float64).eps * max(abs(value), 1.0) / h


def brute_reconstruct(edges, weights, dominant_class, class_to_bucket, n_sources, n_buckets):
    """Per-source bucket sums with plain loops."""
    out = [[0.0] * n_buckets for _ in range(n_sources)]
    for (s, a), w in zip(edges, weights):
        out[s][class_to_bucket[dominant_class[a]]] += w
    return np.array(out)


def partitions_of(labels) -> set:
    """Partition induced by a label vector, as a set of frozensets (label names ignored)."""
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, set()).add(i)
    return {frozenset(g) for g in groups.values()}


# ------------------------------------------------------------ encoder/weights


def loop_encode(tensors, heads, layers, xs, xa, edges):
    """Node-by-node restatement of the typed attention encoder."""
    T = tensors
    H = {"source": np.asarray(xs) @ T["proj.source"], "agent": np.asarray(xa) @ T["proj.agent"]}
    nbrs = {"source": {}, "agent": {}}
    for s, a in edges:
        nbrs["source"].setdefault(s, []).append(a)
        nbrs["agent"].setdefault(a, []).append(s)
    other = {"source": "agent", "agent": "source"}
    rel = {"agent": "sa", "source": "as"}
    for l in range(layers):
        new = {t: H[t].copy() for t in H}
        for t in ("agent", "source"):
            r = rel[t]
            Wq, Wk, Wv, Wo = (T[f"layer{l}.{r}.{m}"] for m in "qkvo")
            d = Wq.shape[0]
            dh = d // heads
            for i in range(H[t].shape[0]):
                nb = nbrs[t].get(i, [])
                if not nb:
                    continue
                q = H[t][i] @ Wq
                agg = np.zeros(d)
                for h in range(heads):
                    sl = slice(h * dh, (h + 1) * dh)
                    keys = [(H[other[t]][j] @ Wk)[sl] for j in nb]
                    scores = [float(q[sl] @ k) / math.sqrt(dh) for k in keys]
                    top = max(scores)
                    ex = [math.exp(x - top) for x in scores]
                    for e, j in zip(ex, nb):
                        agg[sl] += e / sum(ex) * (H[other[t]][j] @ Wv)[sl]
                m = agg @ Wo
                ff = np.maximum((H[t][i] + m) @ T[f"layer{l}.ff.{t}"], 0.0)
                new[t][i] = H[t][i] + T[f"layer{l}.scale.{t}"][0] * (m + ff)
        H = new
    return H["source"], H["agent"]


def loop_weights(hs, ha, edges, gate, tau):
    """Gated distance cost per edge, then exp(-c/tau) normalised per source."""
    costs = []
    for s, a in edges:
        x = np.concatenate([hs[s], ha[a]])
        hidden = np.maximum(x @ gate["gate.w1"] + gate["gate.b1"][0], 0.0)
        z = float(hidden @ gate["gate.w2"][:, 0] + gate["gate.b2"][0, 0])
        costs.append(1.0 / (1.0 + math.exp(-z)) * math.sqrt(float(np.sum((hs[s] - ha[a]) ** 2))))
    out = [0.0] * len(edges)
    for s in {e[0] for e in edges}:
        idx = [i for i, e in enumerate(edges) if e[0] == s]
        w = mp_neg_softmax([costs[i] for i in idx], tau)
        for i, x in zip(idx, w):
            out[i] = float(x)
    return np.array(costs), np.array(out)
