import json

import numpy as np
import pytest

from helpers import TINY_TRAIN, run_pipeline
from localbehavior.behavior_db import EmptyRegion
from localbehavior.cli import RunManifest, main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    return root, run_pipeline(root, main)


def test_full_pipeline_writes_reports_and_manifests(pipeline):
    root, reports = pipeline
    for rep in reports:
        lines = rep.read_text().splitlines()
        assert lines[0] == "label,metric,k,key,value" and len(lines) > 10
        man = RunManifest.read(f"{rep}.manifest.json")
        assert man.command == "eval" and str(rep) in man.outputs
        assert man.config["feature_dim"] == 16 and man.threads == 1
        assert all(len(v) == 64 for v in man.inputs.values())
    assert (root / "ck" / "lbf.bin.history.csv").read_text().startswith("epoch,lr,loss,pred,kd,kd_raw")
    gen = RunManifest.read(f"{root / 'data'}.manifest.json")
    assert gen.seeds == [5] and any(k.endswith("map.csv") for k in gen.outputs)


def test_replay_reproduces_report_bytes(pipeline, capsys):
    root, reports = pipeline
    before = reports[1].read_bytes()
    assert main(["replay", "--manifest", f"{reports[1]}.manifest.json"]) == 0
    assert "replay ok" in capsys.readouterr().out
    assert reports[1].read_bytes() == before


def test_replay_detects_changed_output(pipeline, tmp_path):
    root, reports = pipeline
    man = json.loads(open(f"{reports[0]}.manifest.json").read())
    man["outputs"] = {k: "0" * 64 for k in man["outputs"]}
    bad = tmp_path / "bad.manifest.json"
    bad.write_text(json.dumps(man))
    assert main(["replay", "--manifest", str(bad)]) == 2


def test_db_query_on_empty_db(tmp_path, capsys):
    split = tmp_path / "t.csv"
    split.write_text("scene_id,region_id,agent_id,kind,t_index,x,y\n")
    with pytest.warns(EmptyRegion):
        assert main(["db-build", "--split", str(split), "--region", "r0", "--out", str(tmp_path / "db.csv")]) == 0
    capsys.readouterr()
    assert main(["db-query", "--db", str(tmp_path / "db.csv"), "--x", "0", "--y", "0", "--epsilon", "1.5"]) == 0
    assert capsys.readouterr().out == "scene_id,agent_id,distance\n"


def test_db_query_lists_hits(pipeline, capsys):
    root, _ = pipeline
    first = (root / "data" / "train" / "trajectories.csv").read_text().splitlines()[1].split(",")
    x, y = first[5], first[6]
    out = root / "q.csv"
    assert main(["db-query", "--db", str(root / "db" / "train.csv"), "--x", x, "--y", y, "--epsilon", "0.5",
                 "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[1].split(",")[:2] == [first[0], first[2]] and float(rows[1].split(",")[2]) == 0.0


def test_render_and_stats(pipeline):
    root, _ = pipeline
    d = root / "data"
    assert main(["render", "--data", str(d), "--db", str(root / "db"), "--scene", "test_00000", "--agent", "a0",
                 "--out", str(root / "pm.csv"), "--pgm", str(root / "pm.pgm"), "--set", "raster_size=32"]) == 0
    m = np.loadtxt(root / "pm.csv", delimiter=",")
    assert m.shape == (32, 32) and m.min() >= 0 and m.max() <= 1
    assert main(["stats", "--db", str(root / "db" / "train.csv"), "--map", str(d / "map.csv"),
                 "--out", str(root / "lanes.csv")]) == 0
    assert (root / "lanes.csv").read_text().startswith("lane_id,segment,count")


def _err(capsys):
    return capsys.readouterr().err


def test_usage_errors_name_the_flag(pipeline, tmp_path, capsys):
    root, _ = pipeline
    d = str(root / "data")
    assert main(["train", "--mode", "lba", "--data", d, "--out", str(tmp_path / "x.bin")]) == 2
    assert "--db" in _err(capsys)
    assert main(["train", "--mode", "lbf", "--data", d, "--db", str(root / "db"), "--out",
                 str(tmp_path / "x.bin")]) == 2
    assert "--teacher" in _err(capsys)
    assert main(["train", "--mode", "lbf", "--data", d, "--db", str(root / "db"), "--out", str(tmp_path / "x.bin"),
                 "--teacher", str(root / "ck" / "base.bin")]) == 2
    assert "--teacher" in _err(capsys)
    assert main(["train", "--mode", "baseline", "--data", str(tmp_path / "nope"), "--out", "x"]) == 2
    assert "--data" in _err(capsys)
    assert main(["train", "--mode", "baseline", "--data", d, "--out", "x", "--set", "kd_sites=7"]) == 2
    assert "--config/--set" in _err(capsys)
    assert main(["db-query", "--db", str(root / "db" / "train.csv"), "--x", "0", "--y", "0",
                 "--epsilon", "-1"]) == 2
    assert "--epsilon" in _err(capsys)
    assert main(["eval", "--params", str(root / "ck" / "lba.bin"), "--data", d, "--report", "r"]) == 2
    assert "--db" in _err(capsys)
    with pytest.raises(SystemExit) as ei:
        main(["train", "--data", d])
    assert ei.value.code == 2


def test_thread_env_is_validated(pipeline, monkeypatch, capsys):
    root, _ = pipeline
    monkeypatch.setenv("BF_THREADS", "zero")
    assert main(["db-query", "--db", str(root / "db" / "train.csv"), "--x", "0", "--y", "0",
                 "--epsilon", "1"]) == 2
    assert "BF_THREADS" in _err(capsys)


def test_config_precedence(pipeline, tmp_path):
    root, _ = pipeline
    cfgf = tmp_path / "c.cfg"
    cfgf.write_text("epochs = 3\nfeature_dim = 8\nn_heads = 2\nn_modes = 2\n")
    out = tmp_path / "m.bin"
    assert main(["train", "--mode", "baseline", "--data", str(root / "data"), "--out", str(out),
                 "--config", str(cfgf), "--epochs", "1", "--set", "n_modes=3"]) == 0
    cfg = RunManifest.read(f"{out}.manifest.json").config
    assert (cfg["epochs"], cfg["feature_dim"], cfg["n_modes"]) == (1, 8, 3)


def test_data_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("scene_id,region_id,agent_id,kind,t_index,x,y\ns,r,a,obs,0,nan,0\n")
    assert main(["db-build", "--split", str(bad), "--out", str(tmp_path / "db.csv")]) == 1
    assert "line 2" in _err(capsys)
