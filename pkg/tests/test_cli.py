import csv
import json

import numpy as np
import pytest
import yaml

from golden import TABLE1_HEADER
from stdg.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_PARTIAL, main
from stdg.scenes.dataset_io import load_external
from stdg.tensorio import load_tensor

TINY = {
    "data": {"n_train": 6, "n_test": 3},
    "network": {"widths": [4, 4], "strides": [2, 2], "head_width": 4},
    "regime": {"epochs": 1, "lr_backbone": 1e-3, "lr_heads": 3e-3},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


@pytest.fixture
def dataset(tmp_path, config):
    out = tmp_path / "data"
    assert main(["--config", config, "--out", str(out), "gen-data"]) == EXIT_OK
    return out


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_writes_a_valid_deterministic_dataset(tmp_path, config, dataset):
    m = json.loads((dataset / "manifest.json").read_text())
    assert len(m["samples"]) == 9 and "config_hash" in m
    res = load_external(dataset / "manifest.json")
    assert res.rejected == [] and sum(s.split == "train" for s in res.samples) == 6
    again = tmp_path / "again"
    assert main(["--config", config, "--out", str(again), "gen-data"]) == EXIT_OK
    assert files(dataset) == files(again)


def test_gen_data_respects_count_flags(tmp_path, config):
    out = tmp_path / "few"
    assert main(["--config", config, "--out", str(out), "gen-data", "--n-train", "2", "--n-test", "1"]) == EXIT_OK
    assert len(json.loads((out / "manifest.json").read_text())["samples"]) == 3


def test_hha_converts_every_depth_entry(tmp_path, config, dataset):
    out = tmp_path / "hha"
    assert main(["--config", config, "--out", str(out), "hha", str(dataset / "manifest.json")]) == EXIT_OK
    m = json.loads((out / "manifest.json").read_text())
    for e in m["samples"]:
        h = load_tensor(out / e["hha"])
        assert h.shape == (3, 64, 64) and 0.0 <= h.min() and h.max() <= 1.0
        assert not e["hha_gravity"]["low_confidence"]
    # the rewritten manifest still resolves
    assert load_external(out / "manifest.json").rejected == []


def test_hha_reports_partial_completion(tmp_path, config, dataset):
    m = json.loads((dataset / "manifest.json").read_text())
    m["samples"][0].pop("depth")
    (dataset / "manifest.json").write_text(json.dumps(m))
    assert main(["--config", config, "--out", str(tmp_path / "h"), "hha", str(dataset / "manifest.json")]) == EXIT_PARTIAL


def test_student_without_teacher_is_a_usage_error(tmp_path, config):
    assert main(["--config", config, "--out", str(tmp_path / "s"), "train", "--role", "student"]) == EXIT_CONFIG
    assert main(["--config", config, "--out", str(tmp_path / "s"), "train", "--role", "ablation:fully_teaching"]) == EXIT_CONFIG
    assert main(["--config", config, "--out", str(tmp_path / "s"), "train", "--role", "wizard"]) == EXIT_CONFIG


def test_teacher_then_student_then_eval(tmp_path, config, dataset):
    manifest = str(dataset / "manifest.json")
    t = tmp_path / "teacher"
    assert main(["--config", config, "--out", str(t), "train", "--role", "teacher", "--data", manifest]) == EXIT_OK
    rows = list(csv.DictReader((t / "epochs.csv").read_text().splitlines()))
    assert rows and all(float(r["semi"]) == 0.0 for r in rows)
    s = tmp_path / "student"
    args = ["--config", config, "--out", str(s), "train", "--role", "student", "--teacher", str(t / "checkpoints" / "final"), "--data", manifest]
    assert main(args) == EXIT_OK
    assert json.loads((s / "plan.json").read_text())["variant"] == "semi"
    e = tmp_path / "eval"
    assert main(["--config", config, "--out", str(e), "eval", "--checkpoint", str(s / "checkpoints" / "final"), "--data", manifest]) == EXIT_OK
    rep = json.loads((e / "report.json").read_text())
    assert set(rep["recall"]) == {"PredCls", "SGCls", "SGDet"}
    assert (e / "table1.csv").read_text().splitlines()[0] == TABLE1_HEADER
    # a mismatched network in the config is rejected
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump({**TINY, "network": {**TINY["network"], "head_width": 8}}))
    assert main(["--config", str(other), "--out", str(e), "eval", "--checkpoint", str(s / "checkpoints" / "final"), "--data", manifest]) == EXIT_CONFIG


def test_h_only_ablation_trains_on_two_zeroed_channels(tmp_path, config, dataset):
    out = tmp_path / "h"
    assert main(["--config", config, "--out", str(out), "train", "--role", "ablation:h_only", "--data", str(dataset / "manifest.json")]) == EXIT_OK
    assert json.loads((out / "teacher" / "plan.json").read_text())["encoding"] == "h_only"


def test_oracle_eval_is_all_ones_and_reproducible(tmp_path, config, dataset):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--config", config, "--out", str(out), "eval", "--oracle", "--data", str(dataset / "manifest.json")]) == EXIT_OK
        reports.append((out / "report.json").read_bytes())
        table = (out / "table1.csv").read_text().splitlines()
        assert table[0] == TABLE1_HEADER
        assert table[1].split(",")[2:11] == ["100.0/100.0"] * 9
        assert table[1].split(",")[-2:] == ["-", "100.0"]
    assert reports[0] == reports[1]
    rep = json.loads(reports[0])
    assert all(v == 1.0 for ms in rep["recall"].values() for ks in ms.values() for v in ks.values())


def test_eval_needs_exactly_one_source(tmp_path, config):
    assert main(["--config", config, "--out", str(tmp_path), "eval"]) == EXIT_CONFIG


def test_unknown_config_key_is_rejected(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("netwrok: {}\n")
    assert main(["--config", str(bad), "--out", str(tmp_path), "gen-data"]) == EXIT_CONFIG


def test_missing_manifest_is_a_data_error(tmp_path, config):
    assert main(["--config", config, "--out", str(tmp_path), "hha", str(tmp_path / "nope.json")]) == EXIT_DATA


def test_bad_thread_count(tmp_path, config, monkeypatch):
    assert main(["--config", config, "--threads", "0", "--out", str(tmp_path), "gen-data"]) == EXIT_CONFIG
    monkeypatch.setenv("STDG_THREADS", "many")
    assert main(["--config", config, "--out", str(tmp_path), "gen-data"]) == EXIT_CONFIG
    monkeypatch.setenv("STDG_THREADS", "1")
    assert main(["--config", config, "--out", str(tmp_path), "gen-data", "--n-train", "1", "--n-test", "0"]) == EXIT_OK


def test_selfcheck_detects_a_perturbed_gradient(capsys):
    assert main(["selfcheck", "--perturb", "conv2d"]) == EXIT_CHECK
    out = capsys.readouterr().out
    assert "FAIL grad:conv2d" in out and "PASS grad:relu" in out


def test_bench_writes_throughput(tmp_path, config):
    assert main(["--config", config, "--out", str(tmp_path), "bench", "--n", "3"]) == EXIT_OK
    b = json.loads((tmp_path / "bench.json").read_text())
    assert b["images"] == 3 and b["images_per_sec"] > 0


def test_train_is_deterministic(tmp_path, config, dataset):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--config", config, "--out", str(out), "train", "--role", "baseline", "--data", str(dataset / "manifest.json")]) == EXIT_OK
        outs.append(out)
    for sub in ("checkpoints", "report.json", "epochs.csv"):
        a = outs[0] / sub
        b = outs[1] / sub
        if a.is_dir():
            assert files(a) == files(b)
        else:
            assert a.read_bytes() == b.read_bytes()
    params = np.array([load_tensor(p).sum() for p in sorted((outs[0] / "checkpoints" / "final" / "params").iterdir())])
    assert np.isfinite(params).all()
