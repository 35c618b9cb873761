import json
import subprocess
import sys

import pytest

from mtsdiff.cli import main

TINY = {"epochs": 2, "batch_size": 16, "eval_every": 2, "eval_size": 16, "hidden": 8, "emb_dim": 4,
        "time_dim": 8, "label_dim": 4}


def err_line(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-toy", "--out", str(d / "toy"), "--n", "48", "--seq-len", "6", "--seed", "1"]) == 0
    (d / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--data", str(d / "toy"), "--config", str(d / "cfg.json"), "--out", str(d / "run")]) == 0
    return d


def test_gen_toy_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-toy", "--out", str(tmp_path / name), "--n", "30", "--seed", "4"]) == 0
    for f in ("num.f32", "cat.u8", "labels.u8", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    cfg = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert cfg["command"] == "gen-toy" and cfg["config"]["seed"] == 4


def test_train_outputs(workdir):
    run = workdir / "run"
    assert (run / "model.ckpt").exists()
    assert (run / "metrics.csv").read_text().startswith("step,loss_num,loss_emb,ema_loss")
    cfg = json.loads((run / "run_config.json").read_text())
    assert cfg["config"]["train"]["hidden"] == 8


def test_sample_reproducible_and_eval(workdir, capsys):
    ck = str(workdir / "run" / "model.ckpt")
    for name in ("s1", "s2"):
        assert main(["sample", "--ckpt", ck, "--n", "20", "--steps", "5", "--mode", "cfg-comb", "--seed", "2",
                     "--out", str(workdir / name)]) == 0
    for f in ("num.f32", "cat.u8", "labels.u8"):
        assert (workdir / "s1" / f).read_bytes() == (workdir / "s2" / f).read_bytes()
    rep = workdir / "rep.json"
    assert main(["eval", "--real", str(workdir / "toy"), "--synth", str(workdir / "toy"), "--out", str(rep),
                 "--metrics", "mmd,tvd,trans_dist,dtw"]) == 0
    out = json.loads(rep.read_text())
    assert all(v == 0 for v in out["metrics"].values())
    assert (workdir / "rep.run_config.json").exists()
    assert main(["eval", "--real", str(workdir / "toy"), "--synth", str(workdir / "s1"), "--out", str(rep),
                 "--metrics", "tvd,c2st_logistic", "--n-seeds", "2"]) == 0
    capsys.readouterr()


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert err_line(capsys)["error"] == "usage"
    assert main(["sample", "--ckpt", "x", "--n", "1", "--steps", "0", "--out", str(tmp_path / "o")]) == 1
    assert err_line(capsys)["code"] == 1
    assert main(["frobnicate"]) == 1
    err_line(capsys)


def test_unknown_config_key(workdir, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"epochz": 3}))
    assert main(["train", "--data", str(workdir / "toy"), "--config", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "r")]) == 1
    assert "epochz" in err_line(capsys)["detail"]


def test_data_errors(workdir, tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    assert err_line(capsys)["error"] == "data"
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((workdir / "run" / "model.ckpt").read_bytes())
    raw[-3] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert main(["sample", "--ckpt", str(bad), "--n", "2", "--out", str(tmp_path / "o")]) == 2
    assert err_line(capsys)["code"] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_error(workdir, tmp_path, capsys):
    (tmp_path / "lr.json").write_text(json.dumps(dict(TINY, learning_rate=1e30)))
    code = main(["train", "--data", str(workdir / "toy"), "--config", str(tmp_path / "lr.json"),
                 "--out", str(tmp_path / "r")])
    assert code == 3
    assert err_line(capsys)["error"] == "numeric"


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mtsdiff.cli", "gen-toy", "--out", str(tmp_path / "t"), "--n", "5"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    r = subprocess.run([sys.executable, "-m", "mtsdiff.cli", "eval"], capture_output=True, text=True)
    assert r.returncode == 1 and json.loads(r.stderr.strip())["error"] == "usage"
