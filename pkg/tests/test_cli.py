import csv
import json
import math
import subprocess
import sys

import pytest

from matrixkit.cli import main
from matrixkit.synthscene import read_scene

TINY = {
    "schema_version": 1,
    "data": {"n_views": 3, "depth_resolution": [8, 8]},
    "camera": {"resolution": [16, 16]},
    "model": {"preset": "overfit", "hidden_enc": 32, "hidden_dec": 32, "enc_blocks": 1, "dec_blocks": 1, "heads": 2},
    "train": {"steps": 4, "batch_size": 4, "log_every": 0, "micro_batches": 2},
    "guidance": {"scales": {"rgb": 1.5, "pose": 1.5, "depth": 1.0}, "steps": 3, "sampler": "ddim"},
}


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(autouse=True)
def one_thread(monkeypatch):
    monkeypatch.setenv("MATRIXKIT_THREADS", "1")


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("MATRIXKIT_THREADS", "1")
        assert main(["gen-data", "--config", str(root / "tiny.json"), "--out", str(root / "data"), "--scenes", "2", "--seed", "5"]) == 0
        assert main(["train", "--config", str(root / "tiny.json"), "--data", str(root / "data"), "--out", str(root / "run"),
                     "--checkpoint-every", "2"]) == 0
    return root


def test_gen_data_layout_and_determinism(run, tmp_path):
    data = run / "data"
    assert sorted(p.name for p in data.iterdir()) == ["config.json", "scene_0000", "scene_0001"]
    assert read_scene(data / "scene_0001").seed == 6
    assert main(["gen-data", "--config", str(run / "tiny.json"), "--out", str(tmp_path / "again"), "--scenes", "2", "--seed", "5"]) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(data)


def test_train_outputs_and_determinism(run, tmp_path):
    out = run / "run"
    assert (out / "model.ckpt").exists() and (out / "config.json").exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["step_000002.ckpt", "step_000004.ckpt"]
    rows = list(csv.reader(open(out / "loss.csv")))
    assert rows[0] == ["step", "task", "loss"]
    assert [r[0] for r in rows[1:5]] == ["0", "1", "2", "3"] and all(r[1] == "all" for r in rows[1:5])
    assert {r[1] for r in rows[5:]} <= {"nvs", "pose", "depth", "random"}
    assert main(["train", "--config", str(run / "tiny.json"), "--data", str(run / "data"), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2" / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()
    assert (tmp_path / "r2" / "loss.csv").read_bytes() == (out / "loss.csv").read_bytes()


@pytest.mark.parametrize("task", ["pose", "nvs", "depth"])
def test_infer_is_reproducible(run, tmp_path, task):
    scene = run / "data" / "scene_0000"
    args = ["infer", task, "--ckpt", str(run / "run" / "model.ckpt"), "--scene", str(scene), "--gt-poses"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    pred = read_scene(tmp_path / "a")
    assert len(pred.views) == 3 and json.loads((tmp_path / "a" / "meta.json").read_text())["extra"]["task"] == task
    assert main(args + ["--out", str(tmp_path / "c"), "--seed", "1"]) == 0
    assert tree_bytes(tmp_path / "c") != tree_bytes(tmp_path / "a")


def test_eval_against_itself_is_perfect(run, tmp_path):
    out = tmp_path / "metrics.csv"
    gt = run / "data"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--metrics", "pose,depth,image,pointcloud", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["scene"] for r in rows] == ["scene_0000", "scene_0001", "mean"]
    for r in rows:
        assert float(r["RRA@15"]) == 1.0 and float(r["CA@0.1"]) == 1.0
        assert float(r["AbsRel"]) == 0.0
        assert float(r["PSNR"]) == 99.0 and float(r["SSIM"]) == pytest.approx(1.0)
        assert float(r["overall"]) == 0.0


def test_eval_of_a_prediction(run, tmp_path):
    scene = run / "data" / "scene_0000"
    assert main(["infer", "nvs", "--ckpt", str(run / "run" / "model.ckpt"), "--scene", str(scene), "--out", str(tmp_path / "p")]) == 0
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(scene), "--metrics", "image"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "p" / "metrics.csv")))
    assert list(rows[0]) == ["scene", "PSNR", "SSIM"] and math.isfinite(float(rows[0]["PSNR"]))


def test_fuse_and_trajectories(run, tmp_path):
    import shutil

    scene = tmp_path / "s"
    shutil.copytree(run / "data" / "scene_0001", scene)
    assert main(["fuse", "--scene", str(scene)]) == 0
    assert (scene / "init.ply").exists() and (scene / "fused_000.pfm").exists()
    assert main(["traj", "orbit", "--out", str(tmp_path / "o.json"), "--n", "12"]) == 0
    assert len(json.loads((tmp_path / "o.json").read_text())["cameras"]) == 12
    assert main(["traj", "spline", "--scene", str(scene), "--out", str(tmp_path / "s.json"), "--multiplier", "2", "--density", "10"]) == 0
    assert len(json.loads((tmp_path / "s.json").read_text())["cameras"]) == 20


def test_exit_codes(run, tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == 2
    assert "error[usage]" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "schema_version": 9}))
    assert main(["train", "--config", str(bad), "--data", str(run / "data"), "--out", str(tmp_path / "r")]) == 2
    assert main(["infer", "pose", "--ckpt", str(tmp_path / "none.ckpt"), "--scene", str(run / "data" / "scene_0000")]) == 3
    assert "error[data]" in capsys.readouterr().err
    assert main(["eval", "--pred", str(tmp_path / "empty"), "--gt", str(run / "data")]) == 3
    assert main(["eval", "--pred", str(run / "data"), "--gt", str(run / "data"), "--metrics", "speed"]) == 2
    assert main(["traj", "spline", "--out", str(tmp_path / "t.json")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_single_view_pose_is_a_data_error(run, tmp_path, capsys):
    one = dict(TINY, data={"n_views": 1, "depth_resolution": [8, 8]})
    (tmp_path / "one.json").write_text(json.dumps(one))
    assert main(["gen-data", "--config", str(tmp_path / "one.json"), "--out", str(tmp_path / "d"), "--scenes", "1"]) == 0
    code = main(["infer", "pose", "--ckpt", str(run / "run" / "model.ckpt"), "--scene", str(tmp_path / "d" / "scene_0000")])
    assert code == 3 and "at least 2 images" in capsys.readouterr().err


def test_thread_variable_is_validated(monkeypatch, tmp_path):
    monkeypatch.setenv("MATRIXKIT_THREADS", "many")
    assert main(["traj", "orbit", "--out", str(tmp_path / "o.json")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "matrixkit.cli", "traj", "orbit", "--out", str(tmp_path / "o.json"), "--n", "4"],
        capture_output=True, text=True, env={"MATRIXKIT_THREADS": "1", "PATH": ""},
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "matrixkit.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.startswith("error[usage]")
