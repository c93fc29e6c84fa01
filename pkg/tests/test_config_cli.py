import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from gridalloc.cli import main
from gridalloc.config import ConfigError, load_config, stage_seed
from oracles import FIXTURE

REPO = Path(__file__).resolve().parents[1]

TINY = """\
[run]
seed = 1
out = run

[synth]
enabled = true
n_train = 1
n_test = 1
cells_per_region = 120
facilities_per_region = 4

[grid]
target_cells = 120

[train]
epochs = 4
learning_rate = 0.01
d = 8
heads = 2
layers = 1

[gpm]
residential = 1
commercial = 1
industrial = 1
agricultural = 0.2
other = 0.05
"""

FIXTURE_CFG = """\
[paths]
regions = {d}/regions.geojson
landuse = {d}/landuse.geojson
indicators = {d}/indicators.csv
facilities = {d}/facilities.csv

[grid]
target_cells = 60
quantum = 0

[train]
epochs = 2
d = 8
heads = 2
layers = 1
train_split = all
"""

ARTIFACTS = ("cells.csv", "graph.json", "checkpoint.json", "loss_trace.csv", "weights.csv", "allocations.csv",
             "comparison.csv", "comparison.txt", "weight_quality.csv")


def write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


# ------------------------------------------------------------------- config


def test_unknown_section_and_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match=r"\[bogus\]"):
        load_config(write(tmp_path / "a.ini", TINY + "[bogus]\nx = 1\n"))
    with pytest.raises(ConfigError, match="epochz"):
        load_config(write(tmp_path / "b.ini", TINY.replace("epochs = 4", "epochz = 4")))


@pytest.mark.parametrize("old, new, match", [
    ("epochs = 4", "epochs = four", "epochs"),
    ("heads = 2", "heads = 3", "divisible"),
    ("target_cells = 120", "target_cells = 0", "target_cells"),
    ("other = 0.05", "other = -1", "non-negative"),
    ("[gpm]", "[allocate]\nk = 0\n[gpm]", "k must"),
    ("learning_rate = 0.01", "learning_rate = -1", "learning_rate"),
])
def test_bad_values_rejected(tmp_path, old, new, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path / "c.ini", TINY.replace(old, new)))


def test_paths_required_without_synth(tmp_path):
    with pytest.raises(ConfigError, match="paths"):
        load_config(write(tmp_path / "d.ini", "[train]\nepochs = 1\n"))


def test_overrides_win_and_paths_resolve_against_the_file(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    cfg = load_config(write(sub / "e.ini", TINY))
    assert cfg.seed == 1 and cfg.out == sub / "run"
    assert cfg.data_path("facilities") == sub / "run" / "data" / "facilities.csv"
    cfg = load_config(sub / "e.ini", {"seed": 7, "out": tmp_path / "elsewhere"})
    assert cfg.seed == 7 and cfg.out == tmp_path / "elsewhere"
    assert cfg.train_config().seed == stage_seed(7, "train") != stage_seed(7, "allocate")


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.ini")


def test_stage_seed_is_fixed():
    assert stage_seed(0, "train") == stage_seed(0, "train")
    assert len({stage_seed(s, lab) for s in range(5) for lab in ("synth", "train", "allocate")}) == 15


def test_bundled_quickstart_config_parses():
    cfg = load_config(REPO / "configs" / "quickstart.ini")
    assert cfg.synth and cfg.scenario.n_train == 4 and cfg.scenario.n_test == 2
    assert cfg.train.epochs == 500 and cfg.train.d == 64 and cfg.k is None


# ---------------------------------------------------------------------- cli


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("full")
    assert main(["full-run", "--config", str(write(root / "tiny.ini", TINY))]) == 0
    return root / "run"


def test_full_run_writes_every_artifact(full_run):
    for name in ARTIFACTS + ("manifest.json",):
        assert (full_run / name).exists(), name
    assert sorted(p.name for p in full_run.glob("heatmap_*.pgm")) == ["heatmap_R01.pgm", "heatmap_R02.pgm"]
    man = json.loads((full_run / "manifest.json").read_text())
    assert man["seed"] == 1 and set(man["timing_seconds"]) == {"synth", "ingest", "build-graph", "train",
                                                               "allocate", "evaluate"}
    assert {"regions", "landuse", "indicators", "facilities", "planted_weights", "config"} <= set(man["inputs"])
    assert man["stage_seeds"]["train"] == stage_seed(1, "train")
    assert "numpy" in man["versions"]


def test_stages_one_by_one_match_full_run(tmp_path, full_run):
    cfg = write(tmp_path / "tiny.ini", TINY)
    for stage in ("synth", "ingest", "build-graph", "train", "allocate", "evaluate"):
        assert main([stage, "--config", str(cfg)]) == 0, stage
    for name in ARTIFACTS:
        assert (tmp_path / "run" / name).read_bytes() == (full_run / name).read_bytes(), name


def test_seed_flag_twice_gives_identical_comparison(tmp_path):
    cfg = write(tmp_path / "tiny.ini", TINY)
    for out in ("a", "b"):
        assert main(["full-run", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "a" / "comparison.csv").read_bytes() == (tmp_path / "b" / "comparison.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 7


def test_missing_input_exits_2_and_names_the_path(tmp_path, capsys):
    cfg = write(tmp_path / "fx.ini", FIXTURE_CFG.format(d=tmp_path / "gone"))
    assert main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "error in stage ingest" in err and str(tmp_path / "gone") in err


def test_missing_upstream_artifact_exits_2(tmp_path, capsys):
    cfg = write(tmp_path / "fx.ini", FIXTURE_CFG.format(d=FIXTURE))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "cells.csv" in capsys.readouterr().err


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gridalloc", "full-run", "--config", str(tmp_path / "none.ini")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "none.ini" in proc.stderr


def test_checkpoint_with_other_width_is_refused(tmp_path, capsys):
    cfg = write(tmp_path / "fx.ini", FIXTURE_CFG.format(d=FIXTURE))
    out = str(tmp_path / "o")
    for stage in ("ingest", "build-graph", "train"):
        assert main([stage, "--config", str(cfg), "--out", out]) == 0
    write(cfg, FIXTURE_CFG.format(d=FIXTURE).replace("d = 8", "d = 16"))
    assert main(["allocate", "--config", str(cfg), "--out", out]) == 1
    err = capsys.readouterr().err
    assert "error in stage allocate" in err and "d=8" in err


def test_stale_graph_is_refused(tmp_path, capsys):
    cfg = write(tmp_path / "fx.ini", FIXTURE_CFG.format(d=FIXTURE))
    out = str(tmp_path / "o")
    for stage in ("ingest", "build-graph"):
        assert main([stage, "--config", str(cfg), "--out", out]) == 0
    write(cfg, FIXTURE_CFG.format(d=FIXTURE).replace("target_cells = 60", "target_cells = 90"))
    assert main(["ingest", "--config", str(cfg), "--out", out]) == 0
    assert main(["train", "--config", str(cfg), "--out", out]) == 1
    assert "build-graph" in capsys.readouterr().err


def test_evaluate_without_truth_lists_facilities(tmp_path, capsys):
    data = tmp_path / "data"
    shutil.copytree(FIXTURE, data)
    lines = (data / "facilities.csv").read_text().splitlines()
    lines = [lines[0]] + [ln.rsplit(",", 1)[0] + "," if ln.split(",")[0] in ("F2", "G3") else ln
                          for ln in lines[1:]]
    (data / "facilities.csv").write_text("\n".join(lines) + "\n")
    cfg = write(tmp_path / "fx.ini", FIXTURE_CFG.format(d=data) + "[gpm]\nresidential = 1\ncommercial = 1\n"
                "industrial = 1\nagricultural = 0.2\npark = 0\n")
    assert main(["full-run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "error in stage evaluate" in err and "F2, G3" in err


def test_manifest_tracks_input_changes(tmp_path):
    data = tmp_path / "data"
    shutil.copytree(FIXTURE, data)
    cfg = write(tmp_path / "fx.ini", FIXTURE_CFG.format(d=data))
    out = tmp_path / "o"
    assert main(["ingest", "--config", str(cfg), "--out", str(out)]) == 0
    before = json.loads((out / "manifest.json").read_text())["inputs"]
    text = (data / "indicators.csv").read_text().replace("R2,800,", "R2,801,")
    (data / "indicators.csv").write_text(text)
    assert main(["ingest", "--config", str(cfg), "--out", str(out)]) == 0
    after = json.loads((out / "manifest.json").read_text())["inputs"]
    assert after["indicators"]["sha256"] != before["indicators"]["sha256"]
    assert after["regions"] == before["regions"]


def test_flags_accepted_after_the_subcommand(tmp_path):
    cfg = write(tmp_path / "tiny.ini", TINY)
    assert main(["--seed", "3", "synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 0
    assert json.loads((tmp_path / "x" / "manifest.json").read_text())["seed"] == 3
