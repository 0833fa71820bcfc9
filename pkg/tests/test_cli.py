import json
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest

from ctrpinn import RESTRICTED, load_robot
from ctrpinn.cli import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main
from ctrpinn.pinn import Network

PAPER_TAU = ["-0.032", "-0.023", "-0.005", "-2.49", "-0.32", "-1.52"]
PLANAR_TAU = ["-0.03", "-0.02", "-0.01", "0", "0", "0"]


@pytest.fixture(scope="module")
def tiny_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "tiny.npz"
    Network(load_robot(), RESTRICTED, (8, 8), seed=0).save(path)
    return path


@pytest.fixture
def other_robot(tmp_path):
    text = resources.files("ctrpinn.resources").joinpath("robot_table1.ini").read_text()
    text = text.replace("curvature_per_m = 28.0", "curvature_per_m = 20.0")
    path = tmp_path / "other.ini"
    path.write_text(text)
    return path


def test_solve_writes_backbone_and_metadata(tmp_path, capsys):
    out = tmp_path / "bb.tsv"
    assert main(["solve", "--tau", *PLANAR_TAU, "-o", str(out)]) == EXIT_OK
    assert "converged" in capsys.readouterr().out
    table = np.loadtxt(out, comments="#", skiprows=1)
    assert table[0, 0] == 0.0 and table[-1, 0] == pytest.approx(0.18)
    meta = json.loads((tmp_path / "bb.tsv.meta.json").read_text())
    assert meta["command"] == "solve" and meta["robot_hash"] == load_robot().digest()
    assert meta["options"]["tau"] == [float(v) for v in PLANAR_TAU]


def test_solve_outside_domain_is_input_error(tmp_path, capsys):
    code = main(["solve", "--tau", "-0.032", "-0.023", "0.01", "0", "0", "0", "-o", str(tmp_path / "x")])
    assert code == EXIT_INPUT
    assert "beta3 <= 0" in capsys.readouterr().err


def test_restricted_domain_rejects_large_rotation(tmp_path):
    assert main(["solve", "--restricted", "--tau", *PAPER_TAU, "-o", str(tmp_path / "x")]) == EXIT_INPUT


def test_unconverged_solve_exit_code(tmp_path):
    assert main(["solve", "--max-iter", "1", "--tau", *PAPER_TAU, "-o", str(tmp_path / "x")]) == EXIT_CONVERGENCE


def test_missing_robot_file(tmp_path):
    assert main(["solve", "--robot", str(tmp_path / "nope.ini"), "--tau", *PLANAR_TAU]) == EXIT_INPUT


def test_export_shape_grid_spans_backbone(tmp_path):
    out = tmp_path / "shape.tsv"
    assert main(["export-shape", "--tau", *PAPER_TAU, "--points", "21", "-o", str(out)]) == EXIT_OK
    table = np.loadtxt(out, comments="#", skiprows=1)
    assert table.shape == (21, 16)
    assert table[-1, 0] == pytest.approx(0.21 - 0.032)
    np.testing.assert_allclose(np.linalg.norm(table[:, 4:8], axis=1), 1.0, atol=1e-9)


def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for out in (a, b):
        assert main(["gen-data", "-n", "3", "--seed", "5", "--restricted", "-o", str(out)]) == EXIT_OK
    assert a.read_text() == b.read_text()
    assert len([ln for ln in a.read_text().splitlines() if not ln.startswith("#")]) == 1 + 9


def test_robot_hash_mismatch_needs_override(tmp_path, tiny_weights, other_robot, capsys):
    args = ["export-shape", "--robot", str(other_robot), "--weights", str(tiny_weights),
            "--tau", *PLANAR_TAU, "-o", str(tmp_path / "s.tsv")]
    assert main(args) == EXIT_INPUT
    assert "--allow-robot-mismatch" in capsys.readouterr().err
    assert main(args + ["--allow-robot-mismatch"]) == EXIT_OK


def test_experimental_stage_needs_pretrained_weights(tmp_path):
    code = main(["train", "--stage", "experimental", "--run-dir", str(tmp_path / "run")])
    assert code == EXIT_INPUT


def test_train_small_run(tmp_path):
    run = tmp_path / "run"
    code = main(["train", "--restricted", "--run-dir", str(run), "--n-colloc", "30", "--n-boundary", "5",
                 "--n-obs", "6", "--hidden", "6", "--max-iter", "4", "--checkpoint-every", "2"])
    assert code == EXIT_OK
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["alpha_max"] == pytest.approx(RESTRICTED.alpha_max)
    meta = json.loads((run / "weights.npz.meta.json").read_text())
    assert meta["iterations"] == 4
    net = Network.load(run / "weights.npz")
    assert net.hidden == (6,)


def test_train_anchor_and_norm_options(tmp_path):
    run = tmp_path / "run"
    code = main(["train", "--restricted", "--run-dir", str(run), "--n-colloc", "20", "--n-boundary", "4",
                 "--n-obs", "3", "--hidden", "5", "--max-iter", "2", "--anchor-base", "--anchor-distal",
                 "--loss-norm", "l2"])
    assert code == EXIT_OK
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["anchor_base"] and cfg["anchor_distal"] and cfg["weights"]["norm"] == "l2"
    net = Network.load(run / "weights.npz")
    assert net.anchor_base and net.anchor_distal
    assert np.all(net.predict([0.0], RESTRICTED.sample(1, np.random.default_rng(0)))[:, 8:11] == 0.0)


def test_train_reports_divergence(tmp_path, monkeypatch):
    from ctrpinn import training

    def boom(self, **kw):
        raise training.TrainingDiverged("non-finite loss at iteration 1")

    monkeypatch.setattr(training.Trainer, "run", boom)
    code = main(["train", "--restricted", "--run-dir", str(tmp_path / "r"), "--n-colloc", "10",
                 "--n-boundary", "2", "--n-obs", "0", "--hidden", "4", "--max-iter", "2"])
    assert code == EXIT_NUMERICAL


def test_evaluate_is_deterministic(tmp_path, tiny_weights):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        code = main(["evaluate", "--weights", str(tiny_weights), "--n-acts", "3", "--grid-n", "10",
                     "--states", "1", "--out-dir", str(out)])
        assert code == EXIT_OK
        outs.append(out)
    for f in ("backbone_error.tsv", "states_000.tsv"):
        assert (outs[0] / f).read_text() == (outs[1] / f).read_text()
    summary = json.loads((outs[0] / "backbone_error.json").read_text())
    assert summary["n_actuations"] == 3 and summary["version"] == 1
    assert (outs[0] / "evaluate.meta.json").exists()


def test_evaluate_missing_obs_file(tmp_path, tiny_weights):
    code = main(["evaluate", "--weights", str(tiny_weights), "--n-acts", "1", "--obs",
                 str(tmp_path / "none.tsv"), "--out-dir", str(tmp_path / "e")])
    assert code == EXIT_INPUT


def test_benchmark_small(tmp_path, tiny_weights, capsys):
    out = tmp_path / "rt"
    code = main(["benchmark", "--weights", str(tiny_weights), "--n-acts", "4", "--warmup", "1",
                 "--discretizations", "20", "40", "-o", str(out)])
    assert code == EXIT_OK
    assert len(json.loads((tmp_path / "rt.json").read_text())["reports"]) == 4
    assert "IQR/median" in capsys.readouterr().out


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "ctrpinn.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("solve", "export-shape", "gen-data", "ingest", "train", "evaluate", "benchmark"):
        assert cmd in res.stdout
