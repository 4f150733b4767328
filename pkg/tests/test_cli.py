import json
import os
import signal
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from motionauth import cli
from motionauth import model as M
from motionauth.authsvc import Store
from motionauth.fusion import ScoreMatrix

from test_authsvc import distance_model

TINY = {
    "split_counts": [4, 2, 2],
    "train_windows_per_session": 20,
    "validation_windows_per_session": 20,
    "n_val_pairs": 200,
    "siamese": {"epochs": 2, "windows_per_epoch": 128, "batch_size": 64, "bn_refresh_windows": 64},
    "decision": {"n_train_pairs": 500, "n_test_pairs": 100, "epochs": 2, "lr": 1e-3},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--users", 8, "--sessions-per-posture", 1, "--duration", 20, "--out", out) == 0
    return out / "dataset.json"


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert run("train", "--data", data, "--config", cfg, "--out", root / "m") == 0
    return root / "m"


def _manifest(d):
    return json.loads((Path(d) / "run_manifest.json").read_text())


def test_gen_data_is_deterministic(data, tmp_path):
    assert run("gen-data", "--users", 8, "--sessions-per-posture", 1, "--duration", 20, "--out", tmp_path) == 0
    a, b = data.parent, tmp_path
    assert (a / "dataset.json").read_text() == (b / "dataset.json").read_text()
    names = sorted(p.name for p in (a / "sessions").iterdir())
    assert len(names) == 8 * 3 * 3
    for n in names[:6]:
        assert (a / "sessions" / n).read_bytes() == (b / "sessions" / n).read_bytes()
    man = _manifest(b)
    assert man["subcommand"] == "gen-data" and man["seeds"] == {"data": 0}
    assert man["finished_at"] >= man["started_at"]


@pytest.mark.parametrize("argv", [
    ["gen-data", "--users", "1", "--out", "x"],
    ["gen-data", "--out"],
    ["nope"],
    ["train", "--data", "missing.json", "--out", "x"],
    ["eval", "--model", "missing.bin", "--data", "d.json", "--grid", "--out", "x"],
    ["fuse", "--out", "x"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2


def test_train_writes_artifacts(trained):
    for name in ("model.bin", "split.json", "calibration.json", "siamese_report.json",
                 "decision_report.json", "siamese_loss.csv", "run_manifest.json"):
        assert (trained / name).is_file(), name
    m = M.load_model(trained / "model.bin")
    assert m.calibrated
    split = json.loads((trained / "split.json").read_text())
    assert m.metadata["split"] == split
    assert (len(split["train"]), len(split["validation"]), len(split["test"])) == (4, 2, 2)
    man = _manifest(trained)
    assert man["config"]["siamese"]["epochs"] == 2 and man["config"]["siamese"]["lr"] == 1e-3
    assert man["seeds"] == {"siamese": 0, "decision": 0}


@pytest.mark.parametrize("cfg", [{"bogus": 1}, {"siamese": {"bogus": 1}}, {"siamese": {"lr": -1}},
                                 {"split_counts": [3, 3, 3]}])
def test_train_rejects_bad_config(cfg, data, tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**TINY, **cfg}))
    assert run("train", "--data", data, "--config", p, "--out", tmp_path / "m") == 2


@pytest.mark.parametrize("n,expected", [(45, (35, 3, 7)), (90, (70, 6, 14)), (8, (4, 2, 2))])
def test_auto_split_counts(n, expected):
    assert cli.auto_split_counts(n) == expected


def test_eval_grid(trained, data, tmp_path):
    out = tmp_path / "ev"
    assert run("eval", "--model", trained / "model.bin", "--data", data, "--grid",
               "--probes-per-user", 20, "--out", out) == 0
    lines = (out / "grid.csv").read_text().splitlines()
    assert lines[0] == "n_shot,1s,3s,5s,10s,15s"
    assert len(lines) == 6
    cells = [row.split(",")[1:] for row in lines[1:]]
    assert all(c[0] != "skipped" and 0 <= float(c[0]) <= 1 for c in cells)
    assert all(v == "skipped" for c in cells for v in c[1:])
    report = json.loads((out / "report.json").read_text())
    assert len(report["cells"]) == 5 and len(report["skipped"]) == 20
    assert _manifest(out)["inputs"]["users"] == M.load_model(trained / "model.bin").metadata["split"]["test"]


def test_eval_single_cell_matches_grid(trained, data, tmp_path):
    args = ["--model", trained / "model.bin", "--data", data, "--probes-per-user", 20]
    assert run("eval", *args, "--grid", "--out", tmp_path / "g") == 0
    assert run("eval", *args, "--window", 1, "--shots", 3, "--out", tmp_path / "c") == 0
    header, row = (tmp_path / "c" / "report.csv").read_text().splitlines()
    assert header.startswith("window_seconds,n_shot,f1")
    grid_row = (tmp_path / "g" / "grid.csv").read_text().splitlines()[3].split(",")
    assert row.split(",")[2] == grid_row[1]


def test_eval_unknown_window_is_usage_error(trained, data, tmp_path):
    assert run("eval", "--model", trained / "model.bin", "--data", data, "--window", 5, "--shots", 1,
               "--out", tmp_path) == 2


def _oracle_scores(path, n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    s = np.column_stack([y + rng.normal(0, 0.1, n) for _ in range(3)])
    ScoreMatrix(s, y).write_csv(path)


@pytest.mark.filterwarnings("ignore:matcher EER")
def test_fuse_oracle_scores(tmp_path):
    _oracle_scores(tmp_path / "s.csv")
    _oracle_scores(tmp_path / "t.csv", seed=1)
    assert run("fuse", "--scores", tmp_path / "s.csv", "--train-scores", tmp_path / "t.csv",
               "--out", tmp_path / "f") == 0
    lines = (tmp_path / "f" / "fusion.csv").read_text().splitlines()
    assert lines[0] == "fusion,normalization,f1,eer"
    assert len(lines) == 6
    assert all(line.split(",")[2:] == ["1.0000", "0.0000"] for line in lines[1:])
    rep = json.loads((tmp_path / "f" / "fusion.json").read_text())
    assert set(rep["single_matcher_eer"]) == {"acc", "gyr", "mag"}


def test_fuse_single_file_is_split(tmp_path):
    _oracle_scores(tmp_path / "s.csv")
    assert run("fuse", "--scores", tmp_path / "s.csv", "--method", "sum", "--out", tmp_path / "f") == 0
    lines = (tmp_path / "f" / "fusion.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("sum,")


def test_fuse_missing_column_is_usage_error(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("trial_id,label,score_acc,score_gyr\n0,1,0.5,0.5\n")
    assert run("fuse", "--scores", tmp_path / "s.csv", "--out", tmp_path / "f") == 2
    assert "score_mag" in capsys.readouterr().err


def _start_server(model_path, store, token="sekrit"):
    env = {**os.environ, "PYTHONPATH": str(Path(cli.__file__).parents[1])}
    proc = subprocess.Popen(
        [sys.executable, "-m", "motionauth.cli", "serve", "--model", str(model_path), "--store", str(store),
         "--listen", "127.0.0.1:0", "--operator-token", token],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    line = proc.stdout.readline()
    if not line:
        proc.kill()
        pytest.fail(proc.stderr.read())
    return proc, json.loads(line)["listening"]


def _client(capsys, *argv):
    rc = run(*argv)
    return rc, json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_serve_enroll_verify_fallback(data, tmp_path, capsys):
    model_path = tmp_path / "model.bin"
    M.save_model(distance_model(), model_path)
    store = tmp_path / "store.jsonl"
    proc, addr = _start_server(model_path, store)
    try:
        common = ["--connect", addr, "--user", "u001", "--data", data, "--session", "sitting-0"]
        rc, r = _client(capsys, "enroll", *common, "--shots", 1)
        assert rc == 0 and r == {"ok": True, "user_id": "u001", "n_enrolled": 1}
        rc, r = _client(capsys, "verify", *common, "--index", 0)
        assert rc == 0 and r["accept"] and r["status"] == "active"
        for k in range(1, 4):
            rc, r = _client(capsys, "verify", *common, "--session-user", "u002", "--index", k)
            assert rc == 0 and not r["accept"] and r["consecutive_failures"] == k
        assert r["status"] == "fallback"
        rc, r = _client(capsys, "verify", *common, "--index", 0)
        assert r["accept"] and r["status"] == "fallback"
        rc, r = _client(capsys, "reset-fallback", "--connect", addr, "--user", "u001", "--token", "wrong")
        assert rc == 1 and r["error"]["code"] == "unauthorized"
        rc, r = _client(capsys, "reset-fallback", "--connect", addr, "--user", "u001", "--token", "sekrit")
        assert rc == 0 and r["status"] == "active"
        rc, r = _client(capsys, "verify", *common[:2], "--user", "nobody", *common[4:], "--session-user", "u002")
        assert rc == 1 and r["error"]["code"] == "not_enrolled"
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=20) == 0
    events = [json.loads(line) for line in store.read_text().splitlines()]
    assert [e["type"] for e in events].count("reset") == 1
    reopened = Store(store)
    assert reopened.state("u001").consecutive_failures == 0
    reopened.close()


def test_client_without_server_fails(data, capsys):
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    assert run("reset-fallback", "--connect", f"127.0.0.1:{port}", "--user", "u", "--token", "t") == 1


def test_bad_address_is_usage_error():
    assert run("reset-fallback", "--connect", "nohostport", "--user", "u", "--token", "t") == 2
