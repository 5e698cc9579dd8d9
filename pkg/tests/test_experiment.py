import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from fusenet import experiment
from fusenet.cli import main
from fusenet.config import parse_config_text
from fusenet.errors import ConfigError
from fusenet.experiment import OutputError, emit_outputs, run_experiment, train_run

ROOT = Path(__file__).resolve().parent.parent


def small_config(methods="early, centralnet", seeds="0, 1", kind="redundant", extra=""):
    return parse_config_text(f"""
[dataset]
kind = {kind}
n_train = 120
n_val = 40
n_test = 40
widths = 4, 3
noise_sd = 0.3
n_classes = 3

[model]
hidden = 6, 4

[training]
epochs = 3
per_class = 4
dropout = 0.1

[experiment]
methods = {methods}
seeds = {seeds}
{extra}
""")


def run_signature(run):
    return (run.method, run.seed, run.status, run.test_score, run.best_epoch, run.curve, run.alphas)


def test_same_config_twice_is_bit_identical():
    cfg = small_config()
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert [run_signature(r) for r in a.runs] == [run_signature(r) for r in b.runs]
    assert a.table == b.table


def test_report_matches_request():
    cfg = small_config(methods="unimodal_1, unimodal_2, late, moddrop, gmu", seeds="3, 7, 11")
    report = run_experiment(cfg)
    pairs = [(r.method, r.seed) for r in report.runs]
    assert sorted(pairs) == sorted((m, s) for m in cfg.experiment.methods for s in cfg.experiment.seeds)
    assert len(set(pairs)) == len(pairs)
    assert [row.method for row in report.table] == cfg.experiment.methods
    assert all(row.n_runs == 3 for row in report.table)


def test_unimodal_on_noiseless_redundant_task():
    cfg = parse_config_text("""
[dataset]
kind = redundant
n_train = 400
n_val = 100
n_test = 200
noise_sd = 0.0
n_classes = 4

[training]
epochs = 15
per_class = 8
dropout = 0.0

[experiment]
methods = unimodal_1
seeds = 0
""")
    run = run_experiment(cfg).runs[0]
    assert run.status == "ok" and run.test_score == 1.0


def test_only_centralnet_records_alphas():
    report = run_experiment(small_config(seeds="0"))
    runs = {r.method: r for r in report.runs}
    assert runs["early"].alphas == []
    assert len(runs["centralnet"].alphas) == len(runs["centralnet"].curve)


def test_diverged_run_is_isolated(monkeypatch):
    cfg = small_config(methods="early, centralnet", seeds="0, 1, 2")
    clean = run_experiment(cfg)
    real = experiment.build_model
    calls = {"early": 0}

    def poisoned(method, spec, rng, dropout_rng=None):
        model = real(method, spec, rng, dropout_rng)
        if method == "early":
            calls["early"] += 1
            if calls["early"] == 2:
                model.parameters()[0].values[0, 0] = np.nan
        return model

    monkeypatch.setattr(experiment, "build_model", poisoned)
    report = run_experiment(cfg)
    status = {(r.method, r.seed): r.status for r in report.runs}
    assert status.pop(("early", 1)) == "failed"
    assert set(status.values()) == {"ok"}
    for a, b in zip(clean.runs, report.runs):
        if (a.method, a.seed) != ("early", 1):
            assert run_signature(a) == run_signature(b)
    assert report.table[0].n_runs == 2


def test_emitted_files(tmp_path):
    cfg = small_config(extra="save_models = true")
    written = emit_outputs(run_experiment(cfg), tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["files"]
    for name in summary["files"]:
        assert (tmp_path / name).is_file()
    assert {str(p.relative_to(tmp_path)) for p in written} == set(summary["files"])
    assert summary["seeds"] == [0, 1] and summary["methods"] == ["early", "centralnet"]
    assert parse_config_text(summary["config"]) == cfg
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["early", "centralnet"]
    assert list(rows[0]) == ["method", "metric", "mean", "std", "n_runs"]
    assert (tmp_path / "models" / "centralnet_seed1.fuse").is_file()


def test_alpha_shares_sum_to_one(tmp_path):
    emit_outputs(run_experiment(small_config(methods="centralnet")), tmp_path)
    groups = {}
    with open(tmp_path / "alphas" / "centralnet_seed0.csv") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault((row["epoch"], row["layer"]), []).append(float(row["normalized_share"]))
    assert len(groups) == 3 * 4
    for shares in groups.values():
        assert abs(sum(shares) - 1.0) < 1e-9


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    report = run_experiment(small_config(methods="early", seeds="0"))
    with pytest.raises(OutputError) as err:
        emit_outputs(report, blocker / "out")
    assert str(blocker) in str(err.value)
    assert err.value.exit_code == 5


def test_parallel_workers_match_serial():
    cfg = small_config(methods="late, centralnet")
    serial, parallel = run_experiment(cfg, workers=1), run_experiment(cfg, workers=2)
    assert [run_signature(r) for r in serial.runs] == [run_signature(r) for r in parallel.runs]


def test_on_step_sees_every_step():
    cfg = small_config(methods="centralnet", seeds="0")
    ds = experiment.build_dataset(cfg)
    seen = []
    train_run(cfg, ds, "centralnet", 0, on_step=lambda e, s, br: seen.append((e, s)))
    # 120 samples, 3 classes of roughly 40, 4 per class per batch
    assert seen and seen[-1][0] == 2
    assert len({e for e, _ in seen}) == 3


def test_empty_methods_rejected_at_parse_time():
    with pytest.raises(ConfigError):
        parse_config_text("[dataset]\nkind = redundant\n[experiment]\nmethods = \n")


class TestCli:
    def test_gen_then_run_from_files(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["gen", "--task", "redundant", "--out", str(data), "--seed", "3", "--widths", "4,3",
                     "--classes", "3", "--n-train", "90", "--n-val", "30", "--n-test", "30"]) == 0
        cfg = tmp_path / "run.ini"
        cfg.write_text(f"""
[dataset]
source = files
manifest = data/manifest.ini

[model]
hidden = 5

[training]
epochs = 2
per_class = 3

[experiment]
methods = late, centralnet
seeds = 0, 1
output_dir = out
""")
        assert main(["run", "--config", str(cfg)]) == 0
        assert (tmp_path / "out" / "results.csv").is_file()
        assert "centralnet" in capsys.readouterr().out

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--config", str(ROOT / "configs" / "gradcheck.ini")]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_validation_exit_code(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[training]\nlearnig_rate = 1\n")
        assert main(["run", "--config", str(cfg)]) == 2

    def test_ingestion_exit_code(self, tmp_path):
        cfg = tmp_path / "missing.ini"
        cfg.write_text("[dataset]\nsource = files\nmanifest = nowhere.ini\n[experiment]\nmethods = late\n")
        assert main(["run", "--config", str(cfg)]) == 3

    def test_output_exit_code(self, tmp_path):
        (tmp_path / "blocker").write_text("")
        cfg = tmp_path / "ok.ini"
        cfg.write_text("[dataset]\nkind = redundant\nn_train = 40\nn_val = 10\nn_test = 10\n"
                       "[training]\nepochs = 1\n[experiment]\nmethods = late\nseeds = 0\n")
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "blocker" / "x")]) == 5
