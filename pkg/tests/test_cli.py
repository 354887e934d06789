import csv
import json

import pytest

from diffusionnet import cli, experiments
from diffusionnet.experiments import ExperimentReport
from diffusionnet.geometry import (BumpySphereConfig, bumpy_sphere, load_shape, normalized,
                                   save_labels, save_shape, sample_point_cloud)
from diffusionnet.network import read_checkpoint_header
from diffusionnet.operators import load_operators

NETWORK = {"width": 8, "n_blocks": 1, "input_mode": "hks", "n_out": 4, "k": 16}


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def dataset(tmp_path, capsys):
    """Three labeled bumpy spheres on disk with precomputed caches."""
    entries = []
    for i in range(3):
        s = bumpy_sphere(BumpySphereConfig(subdiv=2), seed=i)
        save_shape(s, tmp_path / f"s{i}.obj")
        save_labels(s.labels, tmp_path / f"s{i}.txt")
        code, _, _ = run_cli(capsys, "precompute", "--input", tmp_path / f"s{i}.obj",
                             "--k", 16, "--out", tmp_path / f"c{i}")
        assert code == 0
        entries.append({"shape": f"s{i}.obj", "cache": f"c{i}", "labels": f"s{i}.txt"})
    return tmp_path, entries


def write_config(path, **parts):
    path.write_text(json.dumps(parts))
    return path


class TestPrecompute:
    def test_round_trip(self, tmp_path, capsys):
        s = bumpy_sphere(BumpySphereConfig(subdiv=2), seed=0)
        save_shape(s, tmp_path / "s.ply")
        code, out, _ = run_cli(capsys, "precompute", "--input", tmp_path / "s.ply",
                               "--k", 12, "--out", tmp_path / "cache")
        assert code == 0
        assert f"V={s.n_vertices}" in out and "k=12" in out and "degenerate_faces=0" in out
        shape = normalized(load_shape(tmp_path / "s.ply"))
        ops = load_operators(tmp_path / "cache", shape=shape, k=12)
        assert ops.n_vertices == s.n_vertices and ops.oriented

    def test_defaults(self, tmp_path, capsys):
        cloud = sample_point_cloud(bumpy_sphere(BumpySphereConfig(subdiv=2)).geometry, 300)
        save_shape(cloud, tmp_path / "p.xyz")
        code, out, _ = run_cli(capsys, "precompute", "--input", tmp_path / "p.xyz",
                               "--out", tmp_path / "c")
        assert code == 0 and "k=128" in out
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        assert manifest["k"] == 128 and manifest["k_neighbors"] == 30 and manifest["F"] == 0

    def test_bad_input(self, tmp_path, capsys):
        (tmp_path / "bad.obj").write_text("v 0 0\nf 1 2 3\n")
        code, _, err = run_cli(capsys, "precompute", "--input", tmp_path / "bad.obj",
                               "--out", tmp_path / "c")
        assert code == 2 and "error" in err
        code, _, _ = run_cli(capsys, "precompute", "--input", tmp_path / "none.obj",
                             "--out", tmp_path / "c")
        assert code == 2


class TestTrainEval:
    def test_train_then_eval_matches_log(self, dataset, capsys):
        root, entries = dataset
        training = {"epochs": 3, "seed": 2}
        cfg = write_config(root / "train.json", network=NETWORK, training=training,
                           train=entries[:2], test=entries[2:], output_dir="run")
        code, out, _ = run_cli(capsys, "train", "--config", cfg)
        assert code == 0 and "final" in out
        rows = list(csv.DictReader(open(root / "run" / "metrics.csv")))
        assert len(rows) == 3
        header, _ = read_checkpoint_header(root / "run" / "final.ckpt")
        assert header["config"] == {**header["config"], **NETWORK}
        assert header["extra"]["train"]["epochs"] == 3

        (root / "test.json").write_text(json.dumps({"samples": entries[2:]}))
        code, out, _ = run_cli(capsys, "eval", "--checkpoint", root / "run" / "final.ckpt",
                               "--dataset", root / "test.json")
        assert code == 0
        assert json.loads(out)["accuracy"] == float(rows[-1]["test_acc"])

    def test_missing_cache_names_precompute(self, dataset, capsys):
        root, entries = dataset
        bad = dict(entries[0], cache="nowhere")
        cfg = write_config(root / "t.json", network=NETWORK, training={"epochs": 1}, train=[bad])
        code, _, err = run_cli(capsys, "train", "--config", cfg)
        assert code == 2
        assert "diffusionnet precompute --input" in err and "nowhere" in err

    def test_stale_cache_rejected(self, dataset, capsys):
        root, entries = dataset
        cfg = write_config(root / "t.json", network={**NETWORK, "k": 32},
                           training={"epochs": 1}, train=entries[:1])
        code, _, err = run_cli(capsys, "train", "--config", cfg)
        assert code == 2 and "k=16" in err

    @pytest.mark.parametrize("patch,where", [
        ({"network": {"width": "wide"}}, "network.width"),
        ({"network": {"depth": 3}}, "network.depth"),
        ({"training": {"lr": -1.0}}, "training"),
        ({"training": {"epochs": True}}, "training.epochs"),
        ({"train": [{"shape": "s0.obj", "cache": "c0"}]}, "train[0]"),
        ({"train": [{"shape": "s0.obj", "cache": 3, "labels": "x"}]}, "train[0].cache"),
        ({"train": []}, "train"),
        ({"extras": 1}, "config.extras"),
    ])
    def test_schema_errors_name_field(self, dataset, capsys, patch, where):
        root, entries = dataset
        parts = {"network": NETWORK, "training": {"epochs": 1}, "train": entries[:1], **patch}
        code, _, err = run_cli(capsys, "train", "--config", write_config(root / "t.json", **parts))
        assert code == 2
        assert err.startswith(f"error: {where}")

    def test_invalid_json(self, tmp_path, capsys):
        (tmp_path / "t.json").write_text("{not json")
        code, _, err = run_cli(capsys, "train", "--config", tmp_path / "t.json")
        assert code == 2 and "invalid JSON" in err


class TestVerifyExperiment:
    def test_verify_writes_reports(self, tmp_path, capsys):
        code, out, _ = run_cli(capsys, "verify", "--suite", "eigen", "--out", tmp_path)
        assert code == 0 and "eigen: PASS" in out
        rep = json.loads((tmp_path / "eigen.json").read_text())
        assert rep["passed"] and rep["schema_version"] == 1
        assert (tmp_path / "eigen.csv").exists()

    def test_experiment_requires_verification(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "experiment", "--name", "ablation", "--out", tmp_path)
        assert code == 2 and "diffusionnet verify --suite all" in err

    def test_breach_exit_code(self, tmp_path, capsys, monkeypatch):
        for s in experiments.SUITES:
            rep = ExperimentReport(s, {})
            rep.add("x", 1.0, 0.0, ">=")
            experiments.record_verification(rep)

        def fake(name, overrides):
            rep = ExperimentReport(name, overrides)
            rep.add("acc", 10.0, 95.0, ">=")
            return rep

        monkeypatch.setattr(experiments, "run_experiment", fake)
        code, out, _ = run_cli(capsys, "experiment", "--name", "orientation", "--out", tmp_path)
        assert code == 1 and "[FAIL]" in out
        assert not json.loads((tmp_path / "orientation.json").read_text())["passed"]

    def test_bad_experiment_override(self, tmp_path, capsys):
        for s in experiments.SUITES:
            rep = ExperimentReport(s, {})
            experiments.record_verification(rep)
        (tmp_path / "o.json").write_text(json.dumps({"epochz": 3}))
        code, _, err = run_cli(capsys, "experiment", "--name", "orientation",
                               "--config", tmp_path / "o.json")
        assert code == 2 and "epochz" in err


@pytest.mark.parametrize("value", ["zero", "0", "-2"])
def test_bad_thread_env(monkeypatch, capsys, tmp_path, value):
    monkeypatch.setenv(cli.THREADS_ENV, value)
    code, _, err = run_cli(capsys, "verify", "--suite", "eigen")
    assert code == 2 and cli.THREADS_ENV in err


def test_thread_env_accepted(monkeypatch, capsys):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert run_cli(capsys, "verify", "--suite", "eigen")[0] == 0


def test_unknown_command(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus"])
    assert exc.value.code == 2
