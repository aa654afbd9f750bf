import json

import pytest

from c2ftp.cli import load_split, main
from c2ftp.config import Config, save_config
from c2ftp.pipeline import load_checkpoint

from conftest import TINY


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_config(Config(**TINY, epochs=1, k=3, mse_warmup_epochs=0), d / "cfg.json")
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_end_to_end(workdir, capsys):
    d = workdir
    assert run("generate-synthetic", "--out", d / "tracks.csv", "--agents", 40, "--seed", 2) == 0
    assert run("prepare-data", "--input", d / "tracks.csv", "--unit", "meters", "--hz", 10, "--out", d / "w.npz",
               "--seed", 1) == 0
    test, meta = load_split(d / "w.npz", "test")
    assert meta["split_seed"] == 1 and len(test) == meta["split_sizes"]["test"]
    cfg = ["--config", d / "cfg.json"]
    assert run("train", "--stage", "refiner", "--data", d / "w.npz", "--out", d / "rf.ckpt", *cfg) == 0
    assert run("train", "--stage", "interaction-standalone", "--data", d / "w.npz", "--out", d / "s1.ckpt", *cfg,
               "--set", "lr=0.002") == 0
    assert load_checkpoint(d / "s1.ckpt").cfg.lr == 0.002
    assert run("train", "--stage", "interaction", "--data", d / "w.npz", "--out", d / "full.ckpt",
               "--refiner", d / "rf.ckpt", "--init", d / "s1.ckpt", *cfg) == 0

    assert run("evaluate", "--ckpt", d / "full.ckpt", "--data", d / "w.npz", "--k", 3, "--out", d / "rep.json") == 0
    assert "Average" in capsys.readouterr().out
    rep = json.loads((d / "rep.json").read_text())
    assert rep["metadata"]["k"] == 3 and len(rep["horizons"]) == 5
    run("evaluate", "--ckpt", d / "full.ckpt", "--data", d / "w.npz", "--k", 3, "--out", d / "rep2.json")
    assert (d / "rep.json").read_text() == (d / "rep2.json").read_text()

    w = test[0]
    scene = {"history": w.target_history.tolist(),
             "neighbors": [{"cell": c, "history": h.tolist()} for c, h in zip(w.neighbor_cells.tolist(),
                                                                               w.neighbor_histories)]}
    (d / "scene.json").write_text(json.dumps(scene))
    assert run("predict", "--ckpt", d / "full.ckpt", "--scene", d / "scene.json", "--k", 4, "--out", d / "p.json") == 0
    pred = json.loads((d / "p.json").read_text())
    assert len(pred["trajectories"]) == 4 and len(pred["trajectories"][0]) == 25
    assert abs(sum(pred["joint_probs"]) - 1) < 1e-5

    assert run("plot-case", "--ckpt", d / "full.ckpt", "--data", d / "w.npz", "--scene", 0, "--k", 3,
               "--out", d / "case.png") == 0
    assert (d / "case.png").stat().st_size > 0
    assert run("sweep-tau", "--ckpt", d / "full.ckpt", "--data", d / "w.npz", "--k", 2, "--out", d / "sw.json") == 0
    assert [r["tau"] for r in json.loads((d / "sw.json").read_text())["sweep"]] == [3, 10, 15]


@pytest.mark.parametrize("argv", [
    ["train", "--stage", "refiner", "--data", "{d}/absent.npz", "--out", "{d}/x.ckpt"],
    ["train", "--stage", "refiner", "--data", "{d}/absent.npz", "--out", "{d}/x.ckpt", "--set", "epochs=0"],
    ["train", "--stage", "refiner", "--data", "{d}/absent.npz", "--out", "{d}/x.ckpt", "--set", "noequals"],
    ["evaluate", "--ckpt", "{d}/cfg.json", "--data", "{d}/absent.npz"],
])
def test_errors_exit_2(workdir, argv, capsys):
    assert run(*[a.format(d=workdir) for a in argv]) == 2
    assert "c2ftp: error" in capsys.readouterr().err


def test_unwritten_stage_choice_rejected():
    with pytest.raises(SystemExit):
        main(["train", "--stage", "stage3", "--data", "x", "--out", "y"])
