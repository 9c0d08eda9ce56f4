import json

import pytest

from rkdlab.cli import main
from rkdlab.graph_core import load_graph
from rkdlab.jsonio import dump_canonical


@pytest.fixture
def audit_config(tmp_path):
    cfg = {
        "graph": {"kind": "sbm", "num_classes": 2, "sizes": [5, 5], "p_in": 0.9,
                  "p_out": 0.05, "seed": 3, "lazy": True},
        "augmentation": {"kind": "chain"},
        "kernel": {"kind": "graph_revealing"},
        "student": {"arch": "table", "init_scale": 0.05},
        "loss": {"lambda_dac": 1.0, "lambda_rkd": 0.001, "tau_dac": 0.95, "temperature": 1.0},
        "labels": {"strategy": "uniform_per_class", "n_per_class": 2},
        "optimizer": {"step_size": 0.4, "iterations": 200, "momentum": 0.9, "rkd_pairs": 16,
                      "sampler": "exhaustive"},
        "seed": 7,
        "tolerances": {"audit_rotations": 10},
        "out_dir": None,
    }
    path = tmp_path / "config.json"
    dump_canonical(cfg, path)
    return path


def test_no_arguments_prints_usage_and_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_graph_generation_writes_disconnected_fixture(tmp_path, capsys):
    out = tmp_path / "g.json"
    code = main(["graph", "--gen", "sbm", "--k", "2", "--sizes", "4,4",
                 "--p-in", "1", "--p-out", "0", "--seed", "7", "--out", str(out)])
    assert code == 0
    assert "alpha=0" in capsys.readouterr().out
    g = load_graph(out)
    assert g.size == 8


def test_spectra_subcommand(tmp_path):
    gpath = tmp_path / "g.json"
    main(["graph", "--gen", "sbm", "--k", "2", "--sizes", "4,4", "--p-in", "0.9",
          "--p-out", "0.1", "--lazy", "--seed", "3", "--out", str(gpath)])
    code = main(["spectra", "--graph", str(gpath), "--out", str(tmp_path / "spec")])
    assert code == 0
    payload = json.loads((tmp_path / "spec" / "spectra.json").read_text())
    assert len(payload["eigenvalues"]) == 8
    assert payload["eigenvalues"] == sorted(payload["eigenvalues"])


def test_audit_subcommand_passes_on_clean_fixture(tmp_path, audit_config, capsys):
    code = main(["audit", "--config", str(audit_config), "--seed", "7",
                 "--out", str(tmp_path / "a1")])
    assert code == 0
    report = json.loads((tmp_path / "a1" / "audit_report.json").read_text())
    assert report["thm1"]["verdicts"]["thm1"] == "pass"
    assert report["thm4"]["verdicts"]["thm4"] == "pass"


def test_rkd_subcommand_trains(tmp_path, audit_config):
    code = main(["rkd", "--config", str(audit_config), "--seed", "1",
                 "--out", str(tmp_path / "rkd")])
    assert code == 0
    report = json.loads((tmp_path / "rkd" / "rkd_report.json").read_text())
    assert report["gap"] < 0.5
    assert (tmp_path / "rkd" / "checkpoint.json").exists()
    trace = (tmp_path / "rkd" / "losses.csv").read_text().splitlines()
    assert trace[0] == "iteration,empirical_loss,population_loss"
    assert len(trace) == 1 + 200


def test_ssl_divergence_writes_failed_run_record(tmp_path, audit_config, capsys):
    cfg = json.loads(audit_config.read_text())
    cfg["optimizer"] = dict(cfg["optimizer"], step_size=500.0)
    bad = tmp_path / "diverge.json"
    dump_canonical(cfg, bad)
    code = main(["ssl", "--config", str(bad), "--seed", "7", "--out", str(tmp_path / "boom")])
    assert code == 1
    record = json.loads((tmp_path / "boom" / "failed_run.json").read_text())
    assert record["status"] == "diverged"
    assert len(record["loss_trace"]) > 0


def test_dac_subcommand(tmp_path, audit_config):
    code = main(["dac", "--config", str(audit_config), "--out", str(tmp_path / "dac")])
    assert code == 0
    report = json.loads((tmp_path / "dac" / "dac_report.json").read_text())
    assert report["exhaustive"] is True
    assert report["c_hat"] > 1.0


def test_labels_subcommand(tmp_path, audit_config):
    code = main(["labels", "--config", str(audit_config), "--seed", "2",
                 "--out", str(tmp_path / "lab")])
    assert code == 0
    report = json.loads((tmp_path / "lab" / "label_report.json").read_text())
    assert report["count"] == 4
    assert report["full_coverage"] is True


def test_ssl_and_report_subcommands(tmp_path, audit_config):
    code = main(["ssl", "--config", str(audit_config), "--seed", "7",
                 "--out", str(tmp_path / "runs" / "r1")])
    assert code == 0
    assert (tmp_path / "runs" / "r1" / "run_result.json").exists()
    code = main(["report", "--out", str(tmp_path / "runs")])
    assert code == 0
    summary = json.loads((tmp_path / "runs" / "report.json").read_text())
    assert len(summary["runs"]) == 1


def test_ssl_sweep(tmp_path, audit_config):
    code = main(["ssl", "--config", str(audit_config), "--sweep", "1,2",
                 "--out", str(tmp_path / "sweep")])
    assert code == 0
    assert (tmp_path / "sweep" / "seed_1" / "run_result.json").exists()
    assert (tmp_path / "sweep" / "seed_2" / "run_result.json").exists()


def test_validation_failure_exits_1(tmp_path, capsys):
    bad = {
        "graph": {"kind": "sbm", "num_classes": 2, "sizes": [3, 3], "p_in": 0.2,
                  "p_out": 0.9, "seed": 0},
        "kernel": {"kind": "graph_revealing"},
        "student": {"arch": "table"},
        "loss": {"lambda_dac": 1.0, "lambda_rkd": 0.0},
        "labels": {"strategy": "uniform_per_class", "n_per_class": 1},
        "optimizer": {},
        "seed": 0,
    }
    path = tmp_path / "bad.json"
    dump_canonical(bad, path)
    code = main(["rkd", "--config", str(path), "--seed", "0", "--out", str(tmp_path / "x")])
    assert code == 1
    assert "p_out" in capsys.readouterr().err


def test_report_on_empty_directory_exits_1(tmp_path, capsys):
    code = main(["report", "--out", str(tmp_path)])
    assert code == 1
    assert "no run_result" in capsys.readouterr().err
