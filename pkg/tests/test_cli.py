import json

import numpy as np
import pytest
from PIL import Image

from splitgs.cli import main
from splitgs.dataio import Frame, load_checkpoint, write_dataset
from splitgs.gaussian import GaussianSet
from splitgs.pipeline import Trainer, TrainConfig, scene_arrays, scene_structure
from splitgs.dataio import Checkpoint, save_checkpoint, load_dataset
from splitgs.scene import build_scene

from helpers import small_camera

TRAIN_FLAGS = ["--dap-iters", "2", "--stage1-iters", "3", "--stage2-iters", "2"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), "--frames", "3", "--res", "20x20", "--seed", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    p.write_text("hidden_width = 8\nhidden_depth = 1\nlog_every = 0\n"
                 "[encoding]\nspatial_bands = 2\ntemporal_bands = 2\n")
    return p


def test_invalid_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["render", "--bogus"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_synth_writes_dataset(data_dir):
    ds = load_dataset(data_dir)
    assert len(ds.frames) == 3 and ds.width == 20 and ds.init_points is not None


def test_train_render_eval_prune_report(data_dir, small_config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(small_config),
                 *TRAIN_FLAGS]) == 0
    ck = out / "checkpoint.ckpt"
    assert ck.is_file() and (out / "log.jsonl").is_file()
    lines = (out / "log.jsonl").read_text().splitlines()
    assert len(lines) == 7 and {"iter", "phase", "losses", "counts", "lr"} <= set(json.loads(lines[0]))
    assert load_checkpoint(ck).meta["config"]["stage1_iters"] == 3

    png = tmp_path / "r.png"
    assert main(["render", "--ckpt", str(ck), "--time", "0.5", "--which", "static",
                 "--out", str(png)]) == 0
    assert Image.open(png).size == (20, 20)

    metrics = tmp_path / "m.json"
    assert main(["eval", "--ckpt", str(ck), "--data", str(data_dir), "--out", str(metrics)]) == 0
    m = json.loads(metrics.read_text())
    assert len(m["frames"]) == 3 and np.isfinite(m["mean_psnr"])

    rep = tmp_path / "p.jsonl"
    assert main(["prune-report", "--ckpt", str(ck), "--data", str(data_dir), "--out", str(rep)]) == 0
    recs = [json.loads(x) for x in rep.read_text().splitlines()]
    assert recs and {"index", "vbar", "freq", "pruned"} == set(recs[0])
    assert all(0 <= r["vbar"] <= r["freq"] <= 1 for r in recs)


def test_pretrain_then_resume(data_dir, small_config, tmp_path):
    a = tmp_path / "a"
    assert main(["pretrain", "--data", str(data_dir), "--out", str(a), "--config", str(small_config),
                 *TRAIN_FLAGS]) == 0
    counters = load_checkpoint(a / "checkpoint.ckpt").meta["counters"]
    assert counters == {"dap": 2, "stage1": 0, "stage2": 0}
    b = tmp_path / "b"
    assert main(["train", "--data", str(data_dir), "--out", str(b),
                 "--resume", str(a / "checkpoint.ckpt")]) == 0
    assert load_checkpoint(b / "checkpoint.ckpt").meta["counters"] == {"dap": 2, "stage1": 3,
                                                                      "stage2": 2}


def test_eval_perfect_fit_is_capped(tmp_path):
    # an empty scene renders the background exactly; 0.2 = 51/255 survives PNG quantization
    bg = (0.2, 0.2, 0.2)
    cam = small_camera(12)
    frames = [Frame(i, t, np.full((12, 12, 3), 0.2), np.ones((12, 12)), cam)
              for i, t in enumerate((0.0, 1.0))]
    write_dataset(tmp_path / "d", frames, bg)
    empty = GaussianSet.empty(1)
    scene = build_scene(empty, empty.copy(), background=bg, hidden_width=4, hidden_depth=1)
    save_checkpoint(tmp_path / "c.ckpt", Checkpoint(scene_arrays(scene),
                                                   {"scene": scene_structure(scene)}))
    out = tmp_path / "m.json"
    assert main(["eval", "--ckpt", str(tmp_path / "c.ckpt"), "--data", str(tmp_path / "d"),
                 "--out", str(out)]) == 0
    assert json.loads(out.read_text())["mean_psnr"] == 100.0


def test_errors_exit_1(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "m.json")]) == 1
    assert "error" in capsys.readouterr().err
    (tmp_path / "c.ckpt").write_bytes(b"garbage")
    assert main(["render", "--ckpt", str(tmp_path / "c.ckpt"), "--time", "0.5",
                 "--out", str(tmp_path / "x.png")]) == 1
    assert main(["render", "--ckpt", str(tmp_path / "c.ckpt"), "--time", "1.5",
                 "--out", str(tmp_path / "x.png")]) == 1
