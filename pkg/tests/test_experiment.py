import csv
from dataclasses import replace

import numpy as np
import pytest

from dynoligo.errors import ConfigError, MissingColumns
from dynoligo.experiment import (COLUMNS, METRIC_COLUMNS, SCHEMA_LINE, Cell, SweepSpec, emit_figures,
                                 evaluate_profile, load_spec, plot_strategy, read_results, regime_order_is_monotone,
                                 regimes_by_cost, run_cell, run_sweep, strategy_series, summarize)
from dynoligo.metrics import Regime
from dynoligo.policies import open_loop_profile


def test_default_grid_and_cell_count():
    spec = SweepSpec()
    grid = spec.c0_grid
    assert len(grid) == 60 and grid[0] == 0.42 and grid[-1] == 0.95
    np.testing.assert_allclose(np.diff(grid), (0.95 - 0.42) / 59, atol=1e-15)
    assert len(spec.cells()) == 1200


def test_thinned_grid_keeps_endpoints():
    spec = SweepSpec().thinned(6)
    assert spec.c0_indices == (0, 12, 24, 35, 47, 59)
    assert len(spec.cells()) == 6 * 2 * 2 * 5


def test_spec_validation_and_yaml(tmp_path):
    with pytest.raises(ConfigError):
        SweepSpec(c0_low=0.9, c0_high=0.5)
    with pytest.raises(ConfigError):
        SweepSpec(c0_indices=(60,))
    with pytest.raises(ConfigError):
        SweepSpec.from_dict({"colour": 1})
    with pytest.raises(ConfigError):
        SweepSpec(information=("sideways",))
    import yaml
    spec = SweepSpec(seeds=(1, 2), algorithms=("ppo",), c0_indices=(3, 4), iterations=7)
    path = tmp_path / "spec.yaml"
    path.write_text(yaml.safe_dump(spec.to_dict()))
    assert load_spec(path) == spec


def test_cell_seeds_are_stable_and_distinct():
    cells = SweepSpec().cells()
    seeds = [c.seed for c in cells]
    assert len(set(seeds)) == len(seeds)
    again = SweepSpec().cells()
    assert [c.seed for c in again] == seeds
    assert len({c.key for c in cells}) == len(cells)
    shifted = SweepSpec(base_seed=1).cells()
    assert shifted[0].seed != cells[0].seed


def test_cell_config():
    cell = SweepSpec().cells()[0]
    c = cell.config()
    assert c.unit_costs == (0.42, 0.8, 0.8) and c.dropouts_enabled and c.horizon == 4


def fake_cell(calls=None, fail=()):
    def run(cell, out_dir=None):
        if calls is not None:
            calls.append(cell.key)
        row = {"c0": cell.c0, "algo": cell.algo, "information": cell.information, "seed": cell.seed_index,
               "c0_index": cell.c0_index, "cell_key": cell.key}
        if cell.c0_index in fail:
            row.update(status="failed", error="BOOM: synthetic")
            return row
        regime = "predation" if cell.c0 < 0.6 else "competition"
        v = float(cell.seed_index) if regime == "predation" else 0.0
        row.update(regime=regime, PI_0=v, PI_1=v / 2, PI_2=0.0, PS=1.0, CS=2.0, W=3.0, dPS=v, dCS=-v, dW=0.0,
                   epsilon=0.01, loss_agent0=0.01, loss_agents12=0.0, status="ok", error="")
        return row
    return run


def small_spec(**kw):
    base = dict(seeds=(0,), c0_indices=(0, 30), algorithms=("ppo",), information=("partial",))
    base.update(kw)
    return SweepSpec(**base)


def test_one_row_per_cell(tmp_path):
    rows = run_sweep(small_spec(), tmp_path, cell_fn=fake_cell())
    assert len(rows) == 2
    with open(tmp_path / "results.csv") as fh:
        assert fh.readline().strip() == SCHEMA_LINE
        header = next(csv.reader(fh))
    assert header == COLUMNS and header[:len(METRIC_COLUMNS)] == METRIC_COLUMNS


def test_resume_skips_finished_cells(tmp_path):
    spec = small_spec(seeds=(0, 1), c0_indices=(0, 10, 20, 30))
    first = []
    run_sweep(replace(spec, c0_indices=(0, 10)), tmp_path, cell_fn=fake_cell(first))
    assert len(first) == 4
    second = []
    rows = run_sweep(spec, tmp_path, cell_fn=fake_cell(second))
    assert len(second) == 4 and not set(first) & set(second)
    assert len(rows) == 8
    third = []
    run_sweep(spec, tmp_path, cell_fn=fake_cell(third))
    assert third == []


def test_failed_cells_are_recorded_and_retried(tmp_path):
    spec = small_spec()
    rows = run_sweep(spec, tmp_path, cell_fn=fake_cell(fail={30}))
    assert sorted(r["status"] for r in rows) == ["failed", "ok"]
    failed = next(r for r in rows if r["status"] == "failed")
    assert failed["error"].startswith("BOOM")
    retried = []
    rows = run_sweep(spec, tmp_path, cell_fn=fake_cell(retried))
    assert len(retried) == 1 and all(r["status"] == "ok" for r in rows)


def test_read_results_types(tmp_path):
    run_sweep(small_spec(), tmp_path, cell_fn=fake_cell())
    row = read_results(tmp_path / "results.csv")[0]
    assert isinstance(row["c0"], float) and isinstance(row["seed"], int) and row["regime"] == "predation"


TINY = dict(iterations=2, trajectories_per_iteration=40, k=4)


def test_real_cell_writes_artifacts(tmp_path):
    cell = small_spec(**TINY).cells()[0]
    row = run_cell(cell, tmp_path)
    assert row["status"] == "ok", row["error"]
    assert set(METRIC_COLUMNS) <= set(row)
    assert row["regime"] in {r.value for r in Regime}
    d = tmp_path / "cells" / cell.name
    assert (d / "trajectory.csv").exists() and (d / "profile.npz").exists() and (d / "training_log.csv").exists()


def test_real_cell_failure_becomes_row():
    spec = small_spec(**TINY)
    cell = Cell(spec, 0, 1.5, "ppo", "partial", 0)  # cost above the price cap
    row = run_cell(cell)
    assert row["status"] == "failed" and row["error"]


def test_results_independent_of_workers(tmp_path):
    spec = small_spec(**TINY)
    serial = run_sweep(spec, tmp_path / "a", workers=1)
    parallel = run_sweep(spec, tmp_path / "b", workers=2)
    assert serial == parallel


def test_evaluate_equilibrium_has_zero_deltas():
    from dynoligo.analytic import baseline_equilibrium
    from dynoligo.market import MarketConfig
    c = MarketConfig(3, 4, (0.7, 0.8, 0.8), (1.0,) * 3, True, "partial")
    res = evaluate_profile(baseline_equilibrium(c), c, 8)["row"]
    assert res["regime"] == "competition"
    assert res["dPS"] == res["dCS"] == res["dW"] == 0.0
    assert res["PI_0"] == res["PI_1"] == res["PI_2"] == 0.0
    assert res["epsilon"] <= 1e-3


def test_figures_and_summaries(tmp_path):
    spec = small_spec(seeds=(0, 1, 2), c0_indices=(0, 10, 40, 50))
    rows = run_sweep(spec, tmp_path, cell_fn=fake_cell())
    paths = emit_figures(rows, tmp_path / "fig")
    assert sorted(p.name for p in paths) == ["pi_ppo_partial.svg", "welfare_ppo_partial.svg"]
    assert all(p.read_text().lstrip().startswith("<?xml") for p in paths)
    comp = [r for r in rows if r["regime"] == "competition"]
    c0, mean, std = summarize(comp, "PI_0")
    assert np.all(mean == 0) and np.all(std == 0)
    single = [r for r in rows if r["seed"] == 1]
    assert np.all(summarize(single, "PI_0")[2] == 0)
    regimes = regimes_by_cost(rows)
    assert list(regimes.values()) == [Regime.PREDATION] * 2 + [Regime.COMPETITION] * 2
    assert regime_order_is_monotone(regimes)


def test_figures_need_columns(tmp_path):
    with pytest.raises(MissingColumns):
        emit_figures([{"c0": 0.5, "algo": "ppo"}], tmp_path)
    with pytest.raises(MissingColumns):
        emit_figures([], tmp_path)


def test_regime_order():
    D, P, C, M, O = Regime.DOMINANCE, Regime.PREDATION, Regime.COMPETITION, Regime.MARGINALIZATION, Regime.OTHER
    assert regime_order_is_monotone({0.4: D, 0.5: P, 0.6: P, 0.8: C, 0.9: M})
    assert regime_order_is_monotone({0.4: P, 0.5: O, 0.9: M})
    assert not regime_order_is_monotone({0.4: C, 0.5: P})


def test_strategy_plot_stops_at_exit(tmp_path):
    from dynoligo.market import MarketConfig, rollout
    c = MarketConfig(3, 4, (0.51, 0.8, 0.8), (1.0,) * 3, True, "partial")
    prices = np.array([[0.51, 0.8, 0.95], [0.51, 0.8, 0.95], [0.9, 0.9, 0.95], [1.0, 1.0, 1.0]])
    traj = rollout(open_loop_profile(prices), c)
    gone = traj.exit_stage()
    traj.to_csv(tmp_path / "t.csv")
    with open(tmp_path / "t.csv", newline="") as fh:
        series = strategy_series(list(csv.DictReader(fh)))
    for agent, pts in series.items():
        last = gone.get(agent, 5) - 1
        assert [t for t, _ in pts] == list(range(1, last + 1))
    assert any(len(p) < 4 for p in series.values())
    out = plot_strategy(tmp_path / "t.csv", tmp_path / "s.svg")
    assert out.exists()
    with pytest.raises(MissingColumns):
        strategy_series([{"stage": 1}])
