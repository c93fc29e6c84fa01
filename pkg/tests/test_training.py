import logging
import math

import numpy as np
import pytest

from gridalloc.encoder import init_params
from gridalloc.graph import build_graph
from gridalloc.predictor import EdgeWeightField, init_predictor
from gridalloc.training import (DEFAULT_MAPPING, CategoryMapping, TrainConfig, TrainingDiverged, build_targets,
                                bucket_onehots, loss, model_loss, reconstruct, train, write_trace)
from gridalloc.geo import Region
from helpers import CLASSES, make_cell, random_world, square
from oracles import brute_reconstruct

MAPPING = CategoryMapping(list(DEFAULT_MAPPING), CLASSES)
ONE_HOT = {c: np.eye(len(CLASSES))[i] for i, c in enumerate(CLASSES)}


def region(rid, population=0.0, **gva):
    return Region(rid, (square(0, 0, 1),), population=population, gva=gva)


# ------------------------------------------------------------------ targets


def test_targets_normalise_in_mapping_order():
    m = CategoryMapping([("population", "residential"), ("gva_ind", "industrial"), ("gva_com", "commercial")],
                        CLASSES)
    t = build_targets([region("A", 50, ind=30, com=20)], m)
    assert t.P.tolist() == [[0.5, 0.3, 0.2, 0.0]] and t.active.tolist() == [True]


def test_single_component_gives_one_hot_target():
    t = build_targets([region("A", 0, industry=7, commerce=0, agriculture=0)], MAPPING)
    assert t.P.tolist() == [[0.0, 1.0, 0.0, 0.0, 0.0]]


def test_zero_region_excluded_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        t = build_targets([region("Z", 0, industry=0, commerce=0, agriculture=0),
                           region("A", 4, industry=1, commerce=3, agriculture=0)], MAPPING)
    assert "'Z'" in caplog.text
    assert t.active.tolist() == [False, True]
    assert abs(t.P[1].sum() - 1) <= 1e-12


@pytest.mark.parametrize("pairs, match", [
    ([("population", "residential"), ("gva_x", "residential")], "injective"),
    ([("population", "residential"), ("population", "industrial")], "twice"),
    ([("population", "forest")], "forest"),
])
def test_bad_mappings_rejected(pairs, match):
    with pytest.raises(ValueError, match=match):
        CategoryMapping(pairs, CLASSES)


def test_residual_bucket_collects_unmapped_classes():
    assert MAPPING.residual_classes == ["other"]
    assert MAPPING.bucket_of_class().tolist() == [0, 2, 1, 3, 4]


# ------------------------------------------------------------ reconstruction


def cells_of(classes):
    return [make_cell(f"c{i}", "A", i, 0, ONE_HOT[c]) for i, c in enumerate(classes)]


def test_all_residential_reconstructs_residential_bucket():
    cells = cells_of(["residential"] * 4)
    f = EdgeWeightField(np.array([0.1, 0.2, 0.3, 0.4]), 0.5, np.zeros(4, int), np.arange(4))
    assert reconstruct(f, cells, MAPPING).tolist() == [[1.0, 0.0, 0.0, 0.0, 0.0]]


def test_half_and_half_two_cells():
    cells = cells_of(["residential", "industrial"])
    f = EdgeWeightField(np.array([0.5, 0.5]), 0.5, np.zeros(2, int), np.arange(2))
    assert reconstruct(f, cells, MAPPING).tolist() == [[0.5, 0.5, 0.0, 0.0, 0.0]]


def test_reconstruction_matches_brute_force_and_conserves_mass():
    rng = np.random.default_rng(0)
    for _ in range(50):
        cells = [make_cell(f"c{i}", "A", i, 0, rng.dirichlet(np.ones(5))) for i in range(10)]
        owner = np.sort(rng.integers(0, 2, 10))
        raw = rng.uniform(0.01, 1, 10)
        w = raw / np.bincount(owner, weights=raw, minlength=2)[owner]
        if np.bincount(owner, minlength=2).min() == 0:
            continue
        got = reconstruct(EdgeWeightField(w, 0.5, owner, np.arange(10)), cells, MAPPING)
        ref = brute_reconstruct(list(zip(owner, range(10))), w, [c.dominant for c in cells],
                                MAPPING.bucket_of_class(), 2, MAPPING.n_buckets)
        assert np.allclose(got, ref, rtol=0, atol=1e-15)
        assert np.all(np.abs(got.sum(axis=1) - 1) <= 1e-9)


# --------------------------------------------------------------------- loss


def test_loss_of_exact_reconstruction_is_tiny():
    P = np.array([[0.5, 0.3, 0.2, 0.0], [0.1, 0.1, 0.8, 0.0]])
    assert 0 <= loss(P, P) < 1e-6


def test_loss_hand_case_is_ln2():
    assert abs(loss([[1.0, 0.0]], [[0.5, 0.5]]) - math.log(2)) < 1e-7


def test_zero_target_entries_contribute_nothing():
    a = loss([[0.6, 0.4, 0.0]], [[0.6, 0.3, 0.1]])
    b = 0.6 * math.log(0.6 / 0.6) + 0.4 * math.log(0.4 / 0.3)
    assert abs(a - b) < 1e-7


def test_loss_non_negative_on_random_distributions():
    rng = np.random.default_rng(1)
    for _ in range(500):
        P = rng.dirichlet(np.ones(5), size=3)
        P[rng.random(P.shape) < 0.3] = 0
        P[P.sum(axis=1) == 0, 0] = 1
        P /= P.sum(axis=1, keepdims=True)
        Q = rng.dirichlet(np.ones(5) * 0.3, size=3)
        assert loss(P, Q) >= 0


# -------------------------------------------------------------------- train


def small_problem(seed=0, sizes=(6, 8)):
    regions, cells = random_world(np.random.default_rng(seed), sizes)
    g, _ = build_graph(regions, cells)
    return g, cells, regions


def test_zero_epochs_returns_initial_params():
    g, cells, regions = small_problem()
    cfg = TrainConfig(epochs=0, d=8, heads=2, seed=3)
    enc, pred, trace = train(g, cells, regions, cfg, MAPPING)
    assert trace == []
    ref = init_params(8, 2, 2, 3, d_source=g.source_features.shape[1], d_agent=g.agent_features.shape[1])
    assert all(np.array_equal(enc.tensors[k], ref.tensors[k]) for k in ref.tensors)
    assert all(np.array_equal(pred.tensors[k], v) for k, v in init_predictor(8, 3).tensors.items())


def test_same_seed_same_trace_and_best_not_worse():
    g, cells, regions = small_problem()
    cfg = TrainConfig(epochs=25, d=8, heads=2, seed=1, learning_rate=1e-2)
    a = train(g, cells, regions, cfg, MAPPING)
    b = train(g, cells, regions, cfg, MAPPING)
    assert a[2] == b[2]
    assert all(np.array_equal(a[0].tensors[k], b[0].tensors[k]) for k in a[0].tensors)
    assert all(np.isfinite(a[2])) and min(a[2]) <= a[2][0]
    assert min(a[2]) < a[2][0]


def test_returns_best_loss_parameters():
    g, cells, regions = small_problem(2)
    cfg = TrainConfig(epochs=30, d=8, heads=2, seed=0, learning_rate=5e-2, optimizer="sgd")
    enc, pred, trace = train(g, cells, regions, cfg, MAPPING)
    L, *_ = model_loss(g, bucket_onehots(cells, MAPPING), build_targets(regions, MAPPING), enc, pred, cfg.tau,
                       cfg.epsilon_smooth)
    assert float(L.data) == min(trace)


def test_early_stopping_shortens_the_trace():
    g, cells, regions = small_problem()
    cfg = TrainConfig(epochs=200, d=8, heads=2, seed=0, learning_rate=0.5, patience=3)
    _, _, trace = train(g, cells, regions, cfg, MAPPING)
    assert len(trace) < 200


def test_divergence_reports_the_epoch():
    g, cells, regions = small_problem()
    cfg = TrainConfig(epochs=10, d=8, heads=2, seed=0, learning_rate=1e300, optimizer="sgd")
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match=r"epoch \d+"):
        train(g, cells, regions, cfg, MAPPING)


def test_misaligned_inputs_rejected():
    g, cells, regions = small_problem()
    with pytest.raises(ValueError, match="sources"):
        train(g, cells, regions[::-1], TrainConfig(epochs=1, d=8, heads=2), MAPPING)
    with pytest.raises(ValueError, match="agents"):
        train(g, cells[:-1], regions, TrainConfig(epochs=1, d=8, heads=2), MAPPING)


@pytest.mark.parametrize("kw", [{"optimizer": "rmsprop"}, {"tau": 0}, {"d": -4}, {"epochs": -1},
                                {"learning_rate": 0}])
def test_bad_train_config_rejected(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_trace_csv(tmp_path):
    write_trace(tmp_path / "t.csv", [1.5, 0.25])
    assert (tmp_path / "t.csv").read_text() == "epoch,loss\n0,1.5\n1,0.25\n"
