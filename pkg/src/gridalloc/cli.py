"""Command-line pipeline: synth, ingest, build-graph, train, allocate, evaluate, full-run.

Every stage reads its inputs from the dataset files and the output directory
and writes its artifacts back there, so running the stages one by one gives
the same bytes as ``full-run``.  Exit codes: 0 success, 2 missing file or bad
configuration, 1 any other stage failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .allocate import METHODS, allocate_all, read_allocations, static_gpm_weights, write_allocations
from .config import DATA_FILES, ConfigError, RunConfig, load_config, stage_seed
from .encoder import load_checkpoint, save_checkpoint
from .evaluate import comparison_rows, format_table, weight_quality, write_comparison_csv, write_weight_quality
from .geo import generate_grids, load_dataset, read_cells, write_cells
from .graph import build_graph, dump_graph, load_graph, subgraph
from .predictor import predict_weights, read_weights_csv, write_heatmap_pgm, write_weights_csv
from .synthetic import generate_synthetic, read_planted
from .training import CategoryMapping, train, write_trace

log = logging.getLogger("gridalloc")

STAGES = ("synth", "ingest", "build-graph", "train", "allocate", "evaluate")


class StaleArtifact(ValueError):
    pass


# -------------------------------------------------------------------- stages


def _dataset(cfg: RunConfig):
    return load_dataset(*(cfg.data_path(r) for r in DATA_FILES))


def _cells(cfg: RunConfig, regions):
    cells, classes = read_cells(cfg.out / "cells.csv")
    known = {r.id for r in regions}
    bad = sorted({c.region_id for c in cells} - known)
    if bad:
        raise StaleArtifact(f"{cfg.out / 'cells.csv'} refers to regions not in the dataset: {bad}")
    return cells, classes


def _graph(cfg: RunConfig, regions, cells):
    g, spec = load_graph(cfg.out / "graph.json")
    if list(g.source_ids) != [r.id for r in regions] or list(g.agent_ids) != [c.id for c in cells]:
        raise StaleArtifact(f"{cfg.out / 'graph.json'} does not match cells.csv and the dataset; rerun build-graph")
    return g, spec


def stage_synth(cfg: RunConfig) -> None:
    if not cfg.synth:
        raise ConfigError("synth needs a [synth] section with enabled = true")
    paths = generate_synthetic(cfg.scenario, cfg.out / "data", stage_seed(cfg.seed, "synth"))
    log.info("synthetic dataset written to %s", paths["regions"].parent)


def stage_ingest(cfg: RunConfig) -> None:
    regions, landuse, facilities = _dataset(cfg)
    cells = generate_grids(regions, landuse, cfg.target_cells, cfg.quantum or None)
    write_cells(cfg.out / "cells.csv", cells, landuse.class_set)
    log.info("%d regions, %d cells, %d facilities, classes %s",
             len(regions), len(cells), len(facilities), landuse.class_set)


def stage_build_graph(cfg: RunConfig) -> None:
    regions, _, _ = _dataset(cfg)
    cells, classes = _cells(cfg, regions)
    g, spec = build_graph(regions, cells, classes)
    dump_graph(cfg.out / "graph.json", g, spec)
    log.info("graph: %d sources, %d agents, %d edges per relation", g.n_sources, g.n_agents, len(g.edges_sa))


def _train_sources(cfg: RunConfig, regions) -> list[int]:
    if cfg.train_split == "all":
        return list(range(len(regions)))
    idx = [i for i, r in enumerate(regions) if r.split == cfg.train_split]
    if not idx:
        raise ValueError(f"no regions with split {cfg.train_split!r}")
    return idx


def stage_train(cfg: RunConfig) -> None:
    regions, _, _ = _dataset(cfg)
    cells, classes = _cells(cfg, regions)
    g, _ = _graph(cfg, regions, cells)
    mapping = CategoryMapping(cfg.mapping, classes)
    src = _train_sources(cfg, regions)
    gt = subgraph(g, src)
    where = {c.id: i for i, c in enumerate(cells)}
    tc = cfg.train_config()
    enc, pred, trace = train(gt, [cells[where[a]] for a in gt.agent_ids], [regions[i] for i in src], tc, mapping)
    save_checkpoint(cfg.out / "checkpoint.json", enc, pred, {
        "tau": tc.tau, "train_regions": [regions[i].id for i in src],
        "mapping": [list(p) for p in mapping.pairs], "epochs_run": len(trace),
    })
    write_trace(cfg.out / "loss_trace.csv", trace)
    if trace:
        log.info("loss %.6g -> %.6g over %d epochs (best %.6g)", trace[0], trace[-1], len(trace), min(trace))


def stage_allocate(cfg: RunConfig) -> None:
    regions, landuse, facilities = _dataset(cfg)
    cells, classes = _cells(cfg, regions)
    g, _ = _graph(cfg, regions, cells)
    tc = cfg.train_config()
    enc, pred, extra = load_checkpoint(cfg.out / "checkpoint.json", expect={
        "d": tc.d, "heads": tc.heads, "layers": tc.layers,
        "d_source": g.source_features.shape[1], "d_agent": g.agent_features.shape[1]})
    field_ = predict_weights(g, enc, pred, extra.get("tau", tc.tau))
    write_weights_csv(cfg.out / "weights.csv", g, field_)
    w = field_.per_agent(g.n_agents)
    for r in regions:
        idx = [i for i, c in enumerate(cells) if c.region_id == r.id]
        if idx:
            write_heatmap_pgm(cfg.out / f"heatmap_{r.id}.pgm", [cells[i].row for i in idx],
                              [cells[i].col for i in idx], w[idx])
    if cfg.gpm is None:
        log.warning("no [gpm] class-weight table configured; GPM columns are skipped")
        gpm = None
    else:
        gpm = static_gpm_weights(cells, cfg.gpm, classes)
    results = allocate_all(cells, facilities, regions, w, gpm, cfg.k, stage_seed(cfg.seed, "allocate"))
    write_allocations(cfg.out / "allocations.csv", [results[m] for m in METHODS if m in results])


def stage_evaluate(cfg: RunConfig) -> None:
    regions, _, facilities = _dataset(cfg)
    results = read_allocations(cfg.out / "allocations.csv")
    rows = comparison_rows(results, facilities, regions)
    write_comparison_csv(cfg.out / "comparison.csv", rows)
    table = format_table(rows)
    (cfg.out / "comparison.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    planted_path = cfg.data_path("planted_weights")
    if planted_path is not None and Path(planted_path).exists():
        cells, _ = _cells(cfg, regions)
        pred, truth = read_weights_csv(cfg.out / "weights.csv"), read_planted(planted_path)
        missing = [c.id for c in cells if c.id not in pred or c.id not in truth]
        if missing:
            raise StaleArtifact(f"weights missing for {len(missing)} cells, e.g. {missing[0]!r}")
        q = weight_quality(np.array([pred[c.id] for c in cells]), np.array([truth[c.id] for c in cells]), cells)
        write_weight_quality(cfg.out / "weight_quality.csv", q, {r.id: r.split for r in regions})


STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "build-graph": stage_build_graph,
    "train": stage_train,
    "allocate": stage_allocate,
    "evaluate": stage_evaluate,
}


# ------------------------------------------------------------------ manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict[str, str]:
    out = {"gridalloc": __version__, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "shapely"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


def write_manifest(cfg: RunConfig, command: str, timings: dict[str, float]) -> Path:
    path = cfg.out / "manifest.json"
    doc = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    inputs = {}
    for role in DATA_FILES + ("planted_weights",):
        p = cfg.data_path(role)
        if p is not None and Path(p).exists():
            inputs[role] = {"path": str(p), "sha256": _sha256(Path(p))}
    if cfg.source is not None:
        inputs["config"] = {"path": str(cfg.source), "sha256": _sha256(cfg.source)}
    doc.update({
        "command": command,
        "seed": cfg.seed,
        "stage_seeds": {s: stage_seed(cfg.seed, s) for s in ("synth", "train", "allocate")},
        "config": cfg.snapshot(),
        "inputs": inputs,
        "versions": _versions(),
    })
    doc.setdefault("timing_seconds", {}).update({k: round(v, 3) for k, v in timings.items()})
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------- cli


def run_stages(cfg: RunConfig, stages, command: str) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    try:
        for name in stages:
            t0 = time.perf_counter()
            log.info("stage %s", name)
            try:
                STAGE_FUNCS[name](cfg)
            except Exception as exc:
                exc.stage = name
                raise
            timings[name] = time.perf_counter() - t0
    finally:
        write_manifest(cfg, command, timings)


def build_parser() -> argparse.ArgumentParser:
    def common(p: argparse.ArgumentParser, default):
        p.add_argument("--config", type=Path, default=default, help="INI run configuration")
        p.add_argument("--seed", type=int, default=default, help="root seed (overrides [run] seed)")
        p.add_argument("--out", type=Path, default=default, help="output directory (overrides [run] out)")
        p.add_argument("--verbose", "-v", action="count", default=default, help="more logging; repeat for debug")

    parser = argparse.ArgumentParser(prog="gridalloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common(parser, None)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "write a synthetic dataset with planted weights to <out>/data",
        "ingest": "load the dataset and rasterise regions into cells.csv",
        "build-graph": "build the region/cell graph (graph.json)",
        "train": "fit encoder and predictor (checkpoint.json, loss_trace.csv)",
        "allocate": "predict weights and allocate with all methods (allocations.csv)",
        "evaluate": "score allocations against ground truth (comparison.csv/.txt)",
        "full-run": "run every stage in order (synth only when enabled)",
    }
    for name, text in helps.items():
        common(sub.add_parser(name, help=text, description=text), argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {None: logging.WARNING, 0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 2
    if args.command == "full-run":
        stages = [s for s in STAGES if s != "synth" or cfg.synth]
    else:
        stages = [args.command]
    try:
        run_stages(cfg, stages, args.command)
    except FileNotFoundError as exc:
        path = exc.filename or (exc.args[0] if exc.args else '?')
        print(f"error in stage {getattr(exc, 'stage', '?')}: missing file: {path}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error in stage {getattr(exc, 'stage', '?')}: bad configuration: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # report any stage failure, keep the traceback for --verbose
        log.debug("traceback", exc_info=True)
        print(f"error in stage {getattr(exc, 'stage', '?')}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
