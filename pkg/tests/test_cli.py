import csv
import shutil
import subprocess

import pytest
import yaml

from dynoligo.cli import main


def write_config(path, costs=(0.8, 0.8, 0.8), info="partial", dropouts=False, **extra):
    d = dict(n_agents=len(costs), horizon=4, unit_costs=list(costs), initial_demands=[1.0] * len(costs),
             dropouts=dropouts, information=info, **extra)
    path.write_text(yaml.safe_dump(d))
    return str(path)


def test_solve_prints_symmetric_path_and_verifies(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["solve-analytic", "--config", cfg, "--out", str(tmp_path / "sol")]) == 0
    out = capsys.readouterr().out
    assert "agent 0: 0.829630 0.844444 0.866667 0.900000" in out
    assert (tmp_path / "sol" / "equilibrium.csv").exists()
    assert main(["verify", "--profile", str(tmp_path / "sol" / "profile.npz"), "--k", "32",
                 "--out", str(tmp_path / "ver")]) == 0
    out = capsys.readouterr().out
    eps = float(out.split("epsilon ")[1].split()[0])
    assert eps <= 1e-3
    with open(tmp_path / "ver" / "verification.csv") as fh:
        assert next(csv.reader(fh)) == ["agent", "K", "current_value", "br_value", "loss", "normalized_loss",
                                        "denominator_flag"]


def test_solve_full_information_writes_coefficients(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", costs=(0.75, 0.8, 0.8), info="full")
    assert main(["solve-analytic", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert "feedback equilibrium" in capsys.readouterr().out
    with open(tmp_path / "coefficients.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12 and set(rows[0]) == {"t", "agent", "lambda1", "lambda2"}
    assert float(rows[-1]["lambda2"]) == pytest.approx(0.5)


def test_invalid_config_is_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", costs=(0.8, 1.5, 0.8), p_max=1.2)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: INVALID_CONFIG: ")


def test_usage_errors(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error: USAGE: ")
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--algo", "sarsa"]) == 2


def test_simulate_baseline(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", costs=(0.7, 0.8, 0.8), dropouts=True)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    with open(tmp_path / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12


def test_train_then_verify(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", costs=(0.6, 0.8, 0.8), dropouts=True)
    assert main(["train", "--config", cfg, "--algo", "reinforce", "--seed", "3", "--iterations", "3",
                 "--trajectories", "50", "--out", str(tmp_path / "run")]) == 0
    with open(tmp_path / "run" / "training_log.csv") as fh:
        assert next(csv.reader(fh)) == ["iteration", "agent", "mean_utility", "lr"]
    assert main(["verify", "--profile", str(tmp_path / "run" / "profile.npz"), "--k", "4"]) == 0
    assert "epsilon" in capsys.readouterr().out


def test_sweep_and_plot(tmp_path, capsys):
    spec = dict(seeds=[0], c0_indices=[0, 59], algorithms=["ppo"], information=["partial"], iterations=2,
                trajectories_per_iteration=40, k=4)
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(spec))
    out = tmp_path / "sweep"
    assert main(["sweep", "--spec", str(tmp_path / "spec.yaml"), "--out", str(out)]) == 0
    assert (out / "figures" / "pi_ppo_partial.svg").exists()
    assert (out / "figures" / "welfare_ppo_partial.svg").exists()
    assert main(["plot", "--results", str(out / "results.csv"), "--out", str(tmp_path / "fig"),
                 "--cell", "c00_ppo_partial_s0"]) == 0
    assert (tmp_path / "fig" / "strategy_c00_ppo_partial_s0.svg").exists()
    assert main(["plot", "--results", str(out / "results.csv"), "--cell", "nope", "--out", str(tmp_path)]) == 2


def test_sweep_with_failed_cells_exits_one(tmp_path, capsys, monkeypatch):
    from dynoligo import experiment
    from dynoligo.errors import DivergedTraining

    def diverge(*a, **k):
        raise DivergedTraining("synthetic divergence")

    monkeypatch.setattr(experiment, "train_selfplay", diverge)
    spec = dict(seeds=[0], c0_indices=[0], algorithms=["ppo"], information=["partial"], iterations=1,
                trajectories_per_iteration=10, k=2)
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(spec))
    assert main(["sweep", "--spec", str(tmp_path / "spec.yaml"), "--out", str(tmp_path / "s")]) == 1
    assert "0 cells ok, 1 failed" in capsys.readouterr().out
    spec["information"] = ["sideways"]
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(spec))
    assert main(["sweep", "--spec", str(tmp_path / "spec.yaml"), "--out", str(tmp_path / "s")]) == 2


@pytest.mark.skipif(shutil.which("dynoligo") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["dynoligo", "--help"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "solve-analytic" in res.stdout
