import csv
import json
from pathlib import Path

import numpy as np
import pytest

from gflcl import cli
from gflcl import numerics as nx
from gflcl.gradcheck import CheckCase, default_components

TABLE1 = Path(__file__).resolve().parents[1] / "scripts" / "table1_published.csv"
TINY = {"data": {"sizes": {"train": 32, "validation": 16, "test": 16}},
        "model": {"decoder_width": 16, "heads": 2, "blocks": 1}}
FAST = ["--epoch-scale", "0.05", "--eval-every", "2", "--curve-every", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "data"
    assert cli.main(["gen", "--config", str(cfg), "--data-dir", str(data)]) == 0
    runs = {}
    for method in ("ft", "replay", "gfl_d"):
        runs[method] = root / method
        argv = ["train", "--config", str(cfg), "--data-dir", str(data), "--method", method,
                "--order", "KS,SID,ER", "--run-dir", str(runs[method])] + FAST
        assert cli.main(argv) == 0
    return {"root": root, "cfg": cfg, "data": data, "runs": runs}


def _train(ws, run_dir, *extra):
    return cli.main(["train", "--config", str(ws["cfg"]), "--data-dir", str(ws["data"]), "--order", "KS,ER",
                     "--run-dir", str(run_dir)] + FAST + list(extra))


# -- gen -------------------------------------------------------------------------------------------


def test_gen_default_sizes(tmp_path, capsys):
    assert cli.main(["gen", "--data-dir", str(tmp_path / "d")]) == 0
    files = sorted(p.name for p in (tmp_path / "d").glob("*.jsonl"))
    assert files == sorted(f"{t}.jsonl" for t in cli.ALL_TASKS)
    for f in files:
        with open(tmp_path / "d" / f) as fh:
            assert sum(1 for _ in fh) == 1 + 1200
    out = capsys.readouterr().out
    assert "1200 samples (800/200/200)" in out


def test_gen_is_reproducible(workspace, tmp_path):
    assert cli.main(["gen", "--config", str(workspace["cfg"]), "--data-dir", str(tmp_path)]) == 0
    a = json.loads((workspace["data"] / "dataset.json").read_text())["files"]
    b = json.loads((tmp_path / "dataset.json").read_text())["files"]
    assert a == b


def test_gen_refuses_overwrite(workspace, tmp_path):
    args = ["gen", "--config", str(workspace["cfg"]), "--data-dir", str(tmp_path / "d")]
    assert cli.main(args) == 0
    assert cli.main(args) == 2
    assert cli.main(args + ["--overwrite"]) == 0


def test_malformed_config_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"method": {"lr": "fast"}}))
    assert cli.main(["train", "--config", str(bad), "--dump-config"]) == 2
    assert "lr" in capsys.readouterr().err


def test_dump_config_defaults(capsys):
    assert cli.main(["train", "--dump-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    m = cfg["method"]
    assert (m["batch_size"], m["lr"], m["patience"], m["buffer_capacity"]) == (16, 1e-4, 1000, 1000)
    assert cfg["order"] == ["KS", "SID", "ER", "IC", "SF", "ASR"]


def test_unknown_task_in_order(capsys):
    assert cli.main(["train", "--order", "KS,XX", "--dump-config"]) == 2


# -- train ---------------------------------------------------------------------------------------------


def test_train_missing_data(tmp_path):
    assert cli.main(["train", "--data-dir", str(tmp_path / "nothing"), "--run-dir", str(tmp_path / "r")]) == 3


def test_run_directory_contents(workspace):
    run = workspace["runs"]["gfl_d"]
    for name in ("manifest.json", "matrix.csv", "curves.csv", "summary.json", "stage1_matrix.csv"):
        assert (run / name).exists(), name
    assert list((run / "checkpoints").glob("*.npz"))
    summary = json.loads((run / "summary.json").read_text())
    assert summary["method"] == "gfl_d" and set(summary["gate"]) == {"KS", "SID", "ER"}
    assert cli.verify_manifest(str(run)) == []


def test_manifest_detects_tampering(workspace, tmp_path):
    run = tmp_path / "r"
    assert _train(workspace, run, "--method", "ft") == 0
    with open(run / "matrix.csv", "a") as fh:
        fh.write("\n")
    assert cli.verify_manifest(str(run)) == ["matrix.csv"]


def test_run_dir_refusal(workspace):
    assert _train(workspace, workspace["runs"]["ft"], "--method", "ft") == 2


def test_training_is_bitwise_reproducible(workspace, tmp_path):
    for d in ("a", "b"):
        assert _train(workspace, tmp_path / d, "--method", "replay") == 0
    assert (tmp_path / "a" / "matrix.csv").read_bytes() == (tmp_path / "b" / "matrix.csv").read_bytes()


def test_few_shot_flag(workspace, tmp_path):
    assert _train(workspace, tmp_path / "fs", "--method", "gfl_d", "--stage1-fraction", "0.5") == 0
    summary = json.loads((tmp_path / "fs" / "summary.json").read_text())
    assert summary["stage1"]["steps_per_task"]["ER"] < summary["steps_per_task"]["ER"]


def test_sweep_orders(workspace, tmp_path):
    base = tmp_path / "sweep"
    argv = ["train", "--config", str(workspace["cfg"]), "--data-dir", str(workspace["data"]), "--method", "ft",
            "--order", "KS,SID,ER", "--sweep-orders", "--run-dir", str(base), "--epoch-scale", "0.02",
            "--curve-every", "0"]
    assert cli.main(argv) == 0
    assert len([d for d in base.iterdir() if (d / "summary.json").exists()]) == 6
    rows = list(csv.reader(open(base / "order_summary.csv")))
    assert [r[0] for r in rows[-2:]] == ["MEAN", "STDEV"] and len(rows) == 1 + 6 + 2


# -- eval ----------------------------------------------------------------------------------------------------


def test_eval_grid(workspace):
    run = workspace["runs"]["gfl_d"]
    assert cli.main(["eval", str(run), "--grid", "--out", str(run / "grid.csv")]) == 0
    rows = list(csv.DictReader(open(run / "grid.csv")))
    for t in ("KS", "SID", "ER"):
        mine = [r for r in rows if r["task"] == t]
        assert len(mine) == 6
        assert all(r["parse_failures"] == "0" for r in mine if r["decoding"] == "constrained")
    first = (run / "grid.csv").read_bytes()
    assert cli.main(["eval", str(run), "--grid", "--out", str(run / "grid.csv")]) == 0
    assert (run / "grid.csv").read_bytes() == first


def test_eval_matches_training_matrix(workspace):
    run = workspace["runs"]["ft"]
    assert cli.main(["eval", str(run), "--out", str(run / "e.csv")]) == 0
    scores = {r["task"]: float(r["score"]) for r in csv.DictReader(open(run / "e.csv"))}
    final = json.loads((run / "summary.json").read_text())["final"]
    for t, v in final.items():
        assert scores[t] == pytest.approx(v, abs=0.005)


def test_eval_untrained_task(workspace):
    assert cli.main(["eval", str(workspace["runs"]["gfl_d"]), "--tasks", "IC"]) == 2


def test_eval_not_a_run(tmp_path):
    assert cli.main(["eval", str(tmp_path)]) == 3


# -- report --------------------------------------------------------------------------------------------------


def test_report_two_methods(workspace, tmp_path):
    runs = workspace["runs"]
    assert cli.main(["report", str(runs["ft"]), str(runs["replay"]), "--out", str(tmp_path)]) == 0
    text = (tmp_path / "report_table.txt").read_text()
    assert "MR" in text.splitlines()[0]
    for t in ("KS", "SID", "ER"):
        assert (tmp_path / f"curves_{t}.svg").exists()


def test_report_single_run_is_reproducible(workspace, tmp_path):
    run = workspace["runs"]["ft"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["report", str(run), "--out", str(a)]) == 0
    assert cli.main(["report", str(run), "--out", str(b)]) == 0
    assert "MR" not in (a / "report_table.txt").read_text()
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_report_incomparable(workspace, tmp_path):
    other = tmp_path / "other"
    summary = json.loads((workspace["runs"]["ft"] / "summary.json").read_text())
    summary["data_fingerprint"] = "different"
    other.mkdir()
    (other / "summary.json").write_text(json.dumps(summary))
    assert cli.main(["report", str(workspace["runs"]["replay"]), str(other), "--out", str(tmp_path / "o")]) == 2


def test_report_offline_published(tmp_path, capsys):
    assert cli.main(["report", "--scores", str(TABLE1), "--out", str(tmp_path)]) == 0
    rows = {r["method"]: float(r["MR"]) for r in csv.DictReader(open(tmp_path / "offline_table.csv"))}
    assert rows == pytest.approx({"MTL": 3.33, "FT": 6.0, "Replay": 2.83, "LwF": 6.67, "DERPP": 3.0,
                                  "GFL_S": 3.83, "GFL_D": 2.5}, abs=0.01)


# -- gradcheck -----------------------------------------------------------------------------------------------


def _buggy_tanh(rng):
    ps = nx.ParameterSet()
    ps.add("weights", rng.standard_normal((3, 4)))

    def op(a):
        out = np.tanh(a.data)
        return nx._node(out, (a,), lambda g: (g * (1.0 - out),))  # wrong derivative

    r = rng.standard_normal((3, 4))
    return CheckCase(lambda: nx.sum_(nx.mul(op(ps["weights"]), nx.Tensor(r))), ps)


class _Args:
    probes = 32
    seed = 0


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "gfl_decoder_loss" in out and "worst" in out


def test_gradcheck_reports_injected_bug(capsys):
    comps = {"tanh": default_components()["tanh"], "buggy_tanh": _buggy_tanh}
    assert cli.cmd_gradcheck(_Args(), comps) == 4
    out = capsys.readouterr().out
    assert "FAILED for: buggy_tanh (parameter weights)" in out


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.ENV_OUTPUT_ROOT, str(tmp_path))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["gen", "--config", str(cfg), "--seed", "7", "--tasks", "ER"]) == 0
    assert (tmp_path / "data" / "s7" / "ER.jsonl").exists()


def test_missing_config_file(tmp_path):
    assert cli.main(["gen", "--config", str(tmp_path / "absent.json")]) == 3
