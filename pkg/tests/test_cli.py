import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from sport.cli import main, parse_relations, render_svg, resolve_seed
from sport.datagen import read_dataset
from sport.errors import ConfigError
from sport.evaluation import load_report
from sport.scene import Relation, load_catalog, load_scene, save_scene

TINY_CONFIG = "T = 10\nbatch = 4\nmodel_dim = 16\nblocks = 1\nheads = 2\ncloud_points = 8\ncloud_blocks = 1\nlr = 1e-3\n"


def _tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d / "data"), "--count", "6", "--relations", "left,on_top_of", "--seed", "3"]) == 0
    (d / "cfg.txt").write_text(TINY_CONFIG, encoding="utf-8")
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "cfg.txt"), "--out", str(d / "run"), "--epochs", "2"]) == 0
    return d


# --- helpers ------------------------------------------------------------------


def test_resolve_seed(monkeypatch):
    monkeypatch.delenv("SPORT_SEED", raising=False)
    assert resolve_seed(None) == 0 and resolve_seed(5) == 5
    monkeypatch.setenv("SPORT_SEED", "42")
    assert resolve_seed(None) == 42 and resolve_seed(5) == 5
    monkeypatch.setenv("SPORT_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_parse_relations():
    assert parse_relations("left, between") == [Relation.LEFT, Relation.BETWEEN]
    with pytest.raises(ConfigError, match="under"):
        parse_relations("left,under")


# --- gen-data -----------------------------------------------------------------


def test_gen_data_balanced(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "12", "--relations", "left,on_top_of", "--seed", "1"]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert {k: v for k, v in manifest["per_relation"].items() if v} == {"left": 6, "on_top_of": 6}
    assert "left\t6" in capsys.readouterr().out


def test_gen_data_reproducible_across_jobs(tmp_path, work):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--count", "6", "--relations", "left,on_top_of", "--seed", "3", "--jobs", "2"]) == 0
    assert _tree(tmp_path / "a") == _tree(work / "data")


def test_gen_data_seed_from_env(tmp_path, monkeypatch, work):
    monkeypatch.setenv("SPORT_SEED", "3")
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--count", "6", "--relations", "left,on_top_of"]) == 0
    assert _tree(tmp_path / "a") == _tree(work / "data")


@pytest.mark.parametrize(
    "argv",
    [
        ["--relations", "left,under"],
        ["--count", "-1"],
        ["--objects-min", "1"],
    ],
)
def test_gen_data_bad_arguments(tmp_path, argv):
    base = ["gen-data", "--out", str(tmp_path / "d"), "--count", "2"]
    assert main(base + argv) == 2


# --- train --------------------------------------------------------------------


def test_train_outputs(work):
    run = work / "run"
    assert (run / "model.spck").read_bytes()[:5] == b"SPCK1"
    rows = list(csv.reader((run / "loss.csv").open()))
    assert rows[0] == ["epoch", "mean_loss"] and len(rows) == 3
    assert "model_dim = 16" in (run / "config.txt").read_text()


def test_train_reproducible_and_resume(tmp_path, work):
    args = ["train", "--data", str(work / "data"), "--config", str(work / "cfg.txt")]
    assert main(args + ["--out", str(tmp_path / "a"), "--epochs", "2"]) == 0
    assert (tmp_path / "a" / "model.spck").read_bytes() == (work / "run" / "model.spck").read_bytes()
    assert main(args + ["--out", str(tmp_path / "b"), "--epochs", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "c"), "--epochs", "2", "--resume", str(tmp_path / "b" / "model.spck")]) == 0
    assert (tmp_path / "c" / "model.spck").read_bytes() == (work / "run" / "model.spck").read_bytes()


def test_train_errors(tmp_path, work):
    (tmp_path / "bad.txt").write_text("bogus = 1\n")
    assert main(["train", "--data", str(work / "data"), "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "empty"), "--count", "0"]) == 0
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


# --- sample -------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene_file(work):
    inst = read_dataset(work / "data")[0]
    d = work / "scene"
    d.mkdir(exist_ok=True)
    shutil.copy(work / "data" / "catalog.json", d / "catalog.json")
    save_scene(d / "scene.json", inst.initial_scene)
    return d / "scene.json", inst


def test_sample_moves_only_movable(tmp_path, work, scene_file, capsys):
    path, inst = scene_file
    argv = ["sample", "--model", str(work / "run" / "model.spck"), "--scene", str(path), "--instruction", inst.instruction, "--seed", "2"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    pose = [float(x) for x in capsys.readouterr().out.split()]
    assert len(pose) == 12
    catalog = load_catalog(path.with_name("catalog.json"))
    before, after = load_scene(path, catalog), load_scene(tmp_path / "a" / "goal_scene.json", catalog)
    for k, (a, b) in enumerate(zip(before.objects, after.objects)):
        if k == inst.movable_index:
            assert b.pose.to_list() == pose
        else:
            assert a.pose == b.pose
    svg = (tmp_path / "a" / "render.svg").read_text()
    for k in range(len(before)):
        assert svg.count(f'id="object-{k}"') == 1
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_sample_unparseable(tmp_path, work, scene_file):
    path, _ = scene_file
    argv = ["sample", "--model", str(work / "run" / "model.spck"), "--scene", str(path), "--out", str(tmp_path / "o")]
    assert main(argv + ["--instruction", "Juggle the purple whale."]) == 5


def test_render_svg_one_group_per_object(scene_file):
    _, inst = scene_file
    svg = render_svg(inst.initial_scene, inst.goal_scene)
    assert svg.startswith("<svg") and svg.count("<g ") == len(inst.initial_scene)
    assert svg.count("<polygon") == 2 * len(inst.initial_scene)


# --- eval ---------------------------------------------------------------------


def test_eval_report_and_jobs(tmp_path, work, capsys):
    base = ["eval", "--model", str(work / "run" / "model.spck"), "--data", str(work / "data"), "--batch-size", "3", "--seed", "1"]
    assert main(base + ["--report", str(tmp_path / "a.json"), "--csv", str(tmp_path / "a.csv")]) == 0
    out = capsys.readouterr().out
    assert "pose accuracy" in out and "on_top_of" in out
    assert main(base + ["--report", str(tmp_path / "b.json"), "--jobs", "2"]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rep = load_report(tmp_path / "a.json")
    assert rep.count == 6 and rep.check()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 7


def test_eval_empty_dataset(tmp_path, work):
    assert main(["gen-data", "--out", str(tmp_path / "empty"), "--count", "0"]) == 0
    argv = ["eval", "--model", str(work / "run" / "model.spck"), "--data", str(tmp_path / "empty"), "--report", str(tmp_path / "r.json")]
    assert main(argv) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sport", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.strip().endswith("0.1.0")
