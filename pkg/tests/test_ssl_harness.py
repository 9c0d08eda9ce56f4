import math

import numpy as np
import pytest

from rkdlab.errors import InvalidConfigError
from rkdlab.graph_core import build_two_blobs
from rkdlab.jsonio import dumps_canonical
from rkdlab.label_acquisition import make_labeled, uniform_per_class_sample
from rkdlab.spectral_rkd import StudentModel
from rkdlab.ssl_harness import (
    ExperimentConfig,
    _combined_grad,
    combined_loss,
    run_experiment,
    run_sweep,
)
from rkdlab.teacher_kernel import KernelSpec, kernel_matrix


def blob_config(**overrides):
    base = dict(
        graph={"kind": "two_blobs", "n_per_class": 8, "separation": 4.0, "noise": 0.5,
               "bandwidth": 1.2, "seed": 5},
        augmentation={"kind": "chain"},
        kernel={"kind": "graph_revealing"},
        student={"arch": "table", "init_scale": 0.05},
        loss={"lambda_dac": 1.0, "lambda_rkd": 0.001, "tau_dac": 0.95, "temperature": 1.0},
        labels={"strategy": "uniform_per_class", "n_per_class": 4},
        optimizer={"step_size": 0.5, "iterations": 60, "momentum": 0.9, "rkd_pairs": 16},
        seed=7,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_round_trip_is_exact(self, tmp_path):
        cfg = blob_config()
        path = tmp_path / "cfg.json"
        cfg.save(path)
        assert ExperimentConfig.from_file(path) == cfg
        assert ExperimentConfig.from_file(path).config_hash() == cfg.config_hash()

    def test_invalid_tau_rejected(self):
        with pytest.raises(InvalidConfigError):
            blob_config(loss={"lambda_dac": 1.0, "lambda_rkd": 0.0, "tau_dac": 1.5})

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidConfigError):
            blob_config(loss={"lambda_dac": -1.0, "lambda_rkd": 0.0})

    def test_missing_referenced_file_rejected(self):
        with pytest.raises(InvalidConfigError, match="does not exist"):
            blob_config(graph={"kind": "file", "path": "/nonexistent/graph.json"})


class TestCombinedLoss:
    def setup_fixture(self):
        g, points = build_two_blobs(4, separation=5.0, noise=0.3, bandwidth=1.0, seed=1)
        kmat = kernel_matrix(KernelSpec.graph_revealing(), g)
        labeled = uniform_per_class_sample(g, 2, seed=0)
        return g, kmat, labeled

    def test_weights_zero_reduces_to_cross_entropy(self):
        g, kmat, labeled = self.setup_fixture()
        model = StudentModel.initialize("table", (g.size, 2), seed=3)
        cfg = {"lambda_dac": 0.0, "lambda_rkd": 0.0}
        ws = [(i, i) for i in range(g.size)]
        pairs = [(0, 1), (2, 3)]
        rep = combined_loss(model, None, labeled, ws, pairs, kmat, cfg)
        assert rep.total == rep.cross_entropy
        assert rep.dac == 0.0 and rep.rkd == 0.0

    def test_confident_correct_model_has_tiny_loss(self):
        g, kmat, labeled = self.setup_fixture()
        scores = 20.0 * np.eye(2)[g.labels].astype(float)
        model = StudentModel("table", (g.size, 2), scores.ravel())
        ws = [(i, i) for i in range(g.size)]
        rep = combined_loss(model, None, labeled, ws, None, kmat,
                            {"lambda_dac": 1.0, "lambda_rkd": 0.0, "tau_dac": 0.95})
        assert rep.confident_count == g.size
        assert rep.dac < 1e-8
        assert rep.cross_entropy < 1e-8

    def test_all_below_threshold_gives_zero_dac(self):
        g, kmat, labeled = self.setup_fixture()
        model = StudentModel("table", (g.size, 2), np.zeros(g.size * 2))
        ws = [(i, i) for i in range(g.size)]
        rep = combined_loss(model, None, labeled, ws, None, kmat,
                            {"lambda_dac": 1.0, "lambda_rkd": 0.0, "tau_dac": 0.95})
        assert rep.confident_count == 0
        assert rep.dac == 0.0

    def test_hand_computed_vector(self):
        # two vertices, one class each; frozen arithmetic for every term
        from conftest import hand_graph

        g = hand_graph([[0.0, 0.5], [0.5, 0.0]], [0, 1], 2)
        kmat = kernel_matrix(KernelSpec.graph_revealing(), g)  # off-diagonal 2
        scores = np.array([[2.0, 0.0], [0.0, 1.0]])
        model = StudentModel("table", (2, 2), scores.ravel())
        labeled = make_labeled(g, [0], "manual", seed=0)
        ws = [(0, 1)]  # weak view vertex 0, strong view vertex 1
        pairs = [(0, 1)]
        cfg = {"lambda_dac": 1.0, "lambda_rkd": 0.5, "tau_dac": 0.8, "temperature": 1.0}
        rep = combined_loss(model, None, labeled, ws, pairs, kmat, cfg)
        ce = -math.log(math.exp(2.0) / (math.exp(2.0) + 1.0))
        conf = math.exp(2.0) / (math.exp(2.0) + 1.0)  # 0.881 >= 0.8 kept
        dac = -math.log(1.0 / (1.0 + math.e))  # strong logits [0,1], pseudo-label 0
        rkd = (0.0 - 2.0) ** 2  # f(0)^T f(1) = 0 vs kernel 2
        assert math.isclose(conf, 0.8807970779778823, rel_tol=1e-12)
        assert math.isclose(rep.cross_entropy, ce, rel_tol=1e-12)
        assert math.isclose(rep.dac, dac, rel_tol=1e-12)
        assert math.isclose(rep.rkd, rkd, rel_tol=1e-12)
        assert math.isclose(rep.total, ce + dac + 0.5 * rkd, rel_tol=1e-12)

    @pytest.mark.parametrize("arch", ["table", "linear", "mlp"])
    def test_gradient_matches_finite_differences(self, arch):
        g, kmat, labeled = self.setup_fixture()
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((g.size, 3)) if arch != "table" else None
        widths = {"table": (g.size, 2), "linear": (3, 2), "mlp": (3, 4, 2)}[arch]
        model = StudentModel.initialize(arch, widths, seed=5, scale=0.4)
        ws = [(i, (i + 1) % g.size if g.labels[i] == g.labels[(i + 1) % g.size] else i)
              for i in range(g.size)]
        pairs = [(0, 1), (2, 5), (3, 3), (6, 7)]
        cfg = {"lambda_dac": 1.0, "lambda_rkd": 0.3, "tau_dac": 0.2, "temperature": 1.0}
        grad = _combined_grad(model, feats, labeled, ws, pairs, kmat, cfg)
        h = 1e-6
        idx = rng.choice(model.parameters.size, size=min(10, model.parameters.size), replace=False)
        for i in idx:
            probe = model.copy()
            probe.parameters[i] += h
            up = combined_loss(probe, feats, labeled, ws, pairs, kmat, cfg).total
            probe.parameters[i] -= 2 * h
            down = combined_loss(probe, feats, labeled, ws, pairs, kmat, cfg).total
            numeric = (up - down) / (2 * h)
            assert abs(numeric - grad[i]) <= 1e-4 * max(1.0, abs(numeric), abs(grad[i]))


class TestRunExperiment:
    def test_zero_iterations_equals_init_accuracy(self):
        cfg = blob_config(optimizer={"step_size": 0.5, "iterations": 0, "momentum": 0.9})
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert a.accuracy == b.accuracy
        assert len(a.losses) == 0

    def test_label_budget_contract(self):
        cfg = blob_config()
        result = run_experiment(cfg)
        counts = np.bincount(result.labeled.classes(), minlength=2)
        assert list(counts) == [4, 4]

    def test_audit_bundle_has_all_theorems(self):
        result = run_experiment(blob_config())
        assert set(result.audits) == {"thm1", "thm4", "thm5"}
        for payload in result.audits.values():
            assert "verdict" in payload

    def test_artifacts_written_and_reproducible(self, tmp_path):
        files = ["run_result.json", "audit_report.json", "losses.csv", "labels.csv", "config.json"]
        cfg = blob_config(out_dir=str(tmp_path / "run"))
        contents = []
        for _ in range(2):
            run_experiment(cfg)
            contents.append({name: (tmp_path / "run" / name).read_bytes() for name in files})
        for name in files:
            assert contents[0][name] == contents[1][name], name

    def test_cluster_wise_strategy_via_spectral_clustering(self):
        cfg = blob_config(labels={"strategy": "cluster_wise", "delta": 0.1},
                          graph={"kind": "sbm", "num_classes": 2, "sizes": [6, 6],
                                 "p_in": 0.9, "p_out": 0.05, "seed": 3, "lazy": True})
        result = run_experiment(cfg)
        assert set(result.labeled.classes().tolist()) == {0, 1}

    def test_sweep_matches_individual_runs(self, tmp_path):
        cfg = blob_config(optimizer={"step_size": 0.5, "iterations": 30, "momentum": 0.9})
        swept = run_sweep(cfg, [3, 4])
        singles = [run_experiment(blob_config(optimizer=cfg.optimizer, seed=s)) for s in (3, 4)]
        assert [r.accuracy for r in swept] == [r.accuracy for r in singles]


class TestCanonicalJson:
    def test_float_formatting_is_stable(self):
        payload = {"a": 1.0 / 3.0, "b": [math.pi, 2], "c": {"nested": True}}
        assert dumps_canonical(payload) == dumps_canonical(payload)
        assert "0.33333333333333331" in dumps_canonical(payload)

    def test_non_finite_floats_become_strings(self):
        text = dumps_canonical({"x": math.inf, "y": -math.inf, "z": math.nan})
        assert '"inf"' in text and '"-inf"' in text and '"nan"' in text
