import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from stgload.cli import dispatch, parse_config_text, UsageError

FAST = ["--set", "epochs=2", "--set", "channels=4", "--set", "n_blocks=2", "--set", "att_dim=4",
        "--set", "gru_dim=4", "--set", "emb_dim=8"]


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(
        "# small synthetic run\n"
        "seed = 4\n"
        f"meter_csv = {root / 'data' / 'meter.csv'}\n"
        f"weather_csv = {root / 'data' / 'weather.csv'}\n"
        f"metadata_csv = {root / 'data' / 'metadata.csv'}\n"
        "n_clusters = 2\nbuildings_per_cluster = 2\nlength = 200\nk = 1\n"
    )
    assert dispatch(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def _run(cfg, out, *extra):
    return dispatch([*extra[:1], "--config", str(cfg), "--out", str(out), *FAST, *extra[1:]])


def test_gradcheck_command(tmp_path, capsys):
    assert dispatch(["gradcheck", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out
    err = float(line.split("max relative error ")[1].split()[0])
    assert err < 1e-4
    assert (tmp_path / "gradcheck.csv").read_text().startswith("parameter,max_rel_error\n")
    assert json.loads((tmp_path / "manifest_gradcheck.json").read_text())["seed"] == 0


def test_synth_outputs(data_dir):
    root, _ = data_dir
    d = root / "data"
    assert (d / "meter.csv").read_text().startswith("timestamp,building_id,value\n")
    assert (d / "labels.csv").read_text().splitlines()[1:] == ["c0_b0,0", "c0_b1,0", "c1_b0,1", "c1_b1,1"]
    assert (d / "metadata.csv").read_text().splitlines()[1] == "c0_b0,site0"


def test_train_evaluate_byte_identical(data_dir, tmp_path):
    root, cfg = data_dir
    before = _digest(root / "data")
    for run in ("a", "b"):
        assert _run(cfg, tmp_path / run, "train") == 0
        assert _run(cfg, tmp_path / run, "evaluate") == 0
    for name in ("metrics.csv", "history.csv", "checkpoint.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert _digest(root / "data") == before
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert header[0] == "scope,mse,mae,r2,smape" and len(header) == 1 + 1 + 4


def test_manifest_records_config_and_hashes(data_dir, tmp_path):
    _, cfg = data_dir
    assert _run(cfg, tmp_path, "train", "--seed", "11") == 0
    man = json.loads((tmp_path / "manifest_train.json").read_text())
    assert man["seed"] == 11 and man["config"]["seed"] == 11
    assert man["config"]["epochs"] == 2 and man["config"]["out"] == str(tmp_path)
    for name, digest in man["artifacts"].items():
        assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest


@pytest.mark.parametrize("variant", ["plain_gcn", "gru", "fcnn", "naive"])
def test_other_variants(data_dir, tmp_path, variant):
    _, cfg = data_dir
    assert _run(cfg, tmp_path, "train", "--variant", variant) == 0
    assert _run(cfg, tmp_path, "evaluate", "--variant", variant) == 0
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[1].startswith("overall,") and len(rows) == 6
    assert _run(cfg, tmp_path, "predict", "--variant", variant) == 0


def test_predict_interpret_robustness(data_dir, tmp_path, capsys):
    _, cfg = data_dir
    assert _run(cfg, tmp_path, "train") == 0
    assert _run(cfg, tmp_path, "predict") == 0
    pred = (tmp_path / "predictions.csv").read_text().splitlines()
    assert pred[0] == "building_id,timestamp,load_normalized,load_kwh" and len(pred) == 5
    assert pred[1].split(",")[1] == "2016-01-09 08:00:00"  # one hour past the 200-hour record
    assert _run(cfg, tmp_path, "interpret") == 0
    assert "ARI" in capsys.readouterr().out
    clusters = (tmp_path / "clusters.csv").read_text().splitlines()
    assert clusters[0] == "building_id,connectivity_label,kmeans_label" and len(clusters) == 5
    sil = (tmp_path / "silhouette.csv").read_text().splitlines()
    assert sil[0] == "k,score" and [l.split(",")[0] for l in sil[1:]] == ["2", "3"]  # k < N = 4
    assert (tmp_path / "adjacency_edges.csv").exists() and (tmp_path / "adjacency_dense.csv").exists()
    assert _run(cfg, tmp_path, "robustness", "--set", "trials=2") == 0
    rob = (tmp_path / "robustness.csv").read_text().splitlines()
    assert rob[0] == "ratio,mse,mae" and len(rob) == 12


def test_predict_on_unseen_buildings(data_dir, tmp_path):
    root, cfg = data_dir
    assert _run(cfg, tmp_path / "model", "train") == 0
    other = tmp_path / "other"
    assert dispatch(["synth", "--seed", "99", "--out", str(other), "--set", "n_clusters=3",
                     "--set", "buildings_per_cluster=1", "--set", "length=60"]) == 0
    new_cfg = tmp_path / "new.cfg"
    new_cfg.write_text(
        f"seed = 4\nmeter_csv = {other / 'meter.csv'}\nweather_csv = {other / 'weather.csv'}\n"
        f"metadata_csv = {other / 'metadata.csv'}\ncheckpoint = {tmp_path / 'model' / 'checkpoint.npz'}\n"
        "k = 1\n"
    )
    assert _run(new_cfg, tmp_path / "pred", "predict") == 0
    rows = (tmp_path / "pred" / "predictions.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["c0_b0", "c1_b0", "c2_b0"]
    assert all(np.isfinite(float(r.split(",")[2])) for r in rows[1:])


def test_missing_meter_path_exit_2(data_dir, tmp_path, capsys):
    _, cfg = data_dir
    missing = tmp_path / "nowhere" / "meter.csv"
    assert dispatch(["train", "--config", str(cfg), "--out", str(tmp_path), "--set", f"meter_csv={missing}"]) == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path, capsys):
    assert dispatch(["fly"]) == 2
    assert dispatch([]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed 4\n")
    assert dispatch(["train", "--config", str(bad)]) == 2
    bad.write_text("seed = 4\nwarp = 9\n")
    assert dispatch(["train", "--config", str(bad)]) == 2
    bad.write_text("seed = four\n")
    assert dispatch(["train", "--config", str(bad)]) == 2
    assert dispatch(["train", "--config", str(tmp_path / "none.cfg")]) == 2
    assert "none.cfg" in capsys.readouterr().err
    assert dispatch(["train", "--out", str(tmp_path)]) == 2  # no seed


def test_runtime_errors_exit_1(tmp_path, capsys):
    d = tmp_path / "d"
    assert dispatch(["synth", "--seed", "0", "--out", str(d), "--set", "length=30"]) == 0
    cfg = [f"meter_csv={d / 'meter.csv'}", f"weather_csv={d / 'weather.csv'}", f"metadata_csv={d / 'metadata.csv'}"]
    args = ["evaluate", "--seed", "0", "--out", str(tmp_path / "o")]
    for c in cfg:
        args += ["--set", c]
    # a checkpoint holding garbage is not a usage error
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "checkpoint.npz").write_bytes(b"not a checkpoint")
    assert dispatch(args) == 1
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_parse_config_text():
    assert parse_config_text("seed = 3\nlr=0.01  # comment\n\nbuildings = a, b\n") == {
        "seed": 3, "lr": 0.01, "buildings": "a, b"}
    with pytest.raises(UsageError):
        parse_config_text("k = 2.5")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stgload", "gradcheck", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "max relative error" in proc.stdout
