import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynoligo.errors import AllFirmsExit, ConfigError, PriceOutOfBounds
from dynoligo.market import (Information, MarketConfig, MarketState, Observation, apply_dropouts,
                             dump_config, load_config, observe, rollout, stage_reward, step)
from dynoligo.policies import OpenLoopPolicy, open_loop_profile


def sym_config(**kw):
    base = dict(n_agents=3, horizon=4, unit_costs=(0.8,) * 3, initial_demands=(1.0,) * 3,
                dropouts_enabled=False, information="partial")
    base.update(kw)
    return MarketConfig(**base)


@pytest.mark.parametrize("args,expected", [
    ((0.9, 0.8, 1.0), 0.01),
    ((0.8, 0.8, 1.0), 0.0),
    ((1.0, 0.8, 1.0), 0.0),
])
def test_stage_reward(args, expected):
    assert stage_reward(*args) == pytest.approx(expected, abs=1e-15)


def test_apply_dropouts_redistributes_area():
    d, exits = apply_dropouts([0.9, 0.9, 0.5], [0.8, 0.8, 0.8], [True] * 3)
    expected = np.sqrt(0.81 + (0.9 / 1.8) * 0.25)
    assert expected == pytest.approx(0.966954, abs=1e-6)
    np.testing.assert_allclose(d, [expected, expected, 0.0], atol=1e-15)
    assert exits == {2}


def test_apply_dropouts_no_exit_is_identity():
    d, exits = apply_dropouts([0.9, 0.9, 0.9], [0.8] * 3, [True] * 3)
    assert d.tolist() == [0.9, 0.9, 0.9]
    assert exits == frozenset()


def test_apply_dropouts_all_exit():
    with pytest.raises(AllFirmsExit):
        apply_dropouts([0.7, 0.7], [0.8, 0.8], [True, True])


def test_exactly_at_cost_survives():
    d, exits = apply_dropouts([0.8, 1.2, 0.5], [0.8] * 3, [True] * 3)
    assert exits == {2}
    assert d[0] > 0.8


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.floats(0.0, 2.0), st.floats(0.0, 1.5)), min_size=1, max_size=6))
def test_area_conservation(pairs):
    tent = np.array([p[0] for p in pairs])
    costs = np.array([p[1] for p in pairs])
    if not np.any(tent >= costs):
        return
    d, exits = apply_dropouts(tent, costs, np.ones(len(pairs), bool))
    assert abs(np.sum(d ** 2) - np.sum(tent ** 2)) <= 1e-12
    assert all(d[i] == 0.0 for i in exits)


def test_step_demand_update():
    cfg = sym_config()
    s1, out = step(MarketState.initial(cfg), [0.82, 0.86, 0.90], cfg)
    np.testing.assert_allclose(s1.demands, [1.04, 1.00, 0.96], atol=1e-12)
    assert out.mean_price == pytest.approx(0.86)
    assert s1.t == 2


def test_step_identical_prices_keep_demands():
    cfg = sym_config()
    s1, _ = step(MarketState.initial(cfg), [0.9] * 3, cfg)
    assert s1.demands.tolist() == [1.0, 1.0, 1.0]


def test_step_rewards():
    cfg = sym_config()
    _, out = step(MarketState.initial(cfg), [0.8, 0.9, 0.9], cfg)
    np.testing.assert_allclose(out.rewards, [0.0, 0.01, 0.01], atol=1e-15)


def test_step_rejects_out_of_bounds_price():
    cfg = sym_config()
    with pytest.raises(PriceOutOfBounds) as e:
        step(MarketState.initial(cfg), [0.79, 0.9, 0.9], cfg)
    assert e.value.agent == 0


def test_step_ignores_price_of_inactive_agent():
    cfg = sym_config(dropouts_enabled=True)
    state = MarketState(2, np.array([1.0, 1.0, 0.0]), np.array([True, True, False]))
    nxt, out = step(state, [0.85, 0.9, 5.0], cfg)
    assert out.mean_price == pytest.approx(0.875)
    assert nxt.demands[2] == 0.0 and out.rewards[2] == 0.0 and out.quantities[2] == 0.0


def test_observe():
    full = sym_config(information="full")
    state = MarketState(2, np.array([1.04, 1.0, 0.96]), np.ones(3, bool))
    assert observe(state, full, 0).as_tuple() == (2, 1.04, 1.0, 0.96)
    part = sym_config()
    assert observe(state, part, 1).as_tuple() == (2,)
    assert observe(MarketState.initial(part), part, 0).as_tuple() == (1,)


def test_rollout_symmetric_constant_demands():
    cfg = sym_config()
    prof = open_loop_profile(np.tile([[0.829630], [0.844444], [0.866667], [0.9]], (1, 3)))
    tr = rollout(prof, cfg)
    assert len(tr.outcomes) == 4 and len(tr.states) == 5
    for s in tr.states:
        assert s.demands.tolist() == [1.0, 1.0, 1.0]
    assert not any(o.exits for o in tr.outcomes)


def test_rollout_horizon_one():
    cfg = sym_config(horizon=1)
    tr = rollout([OpenLoopPolicy(i, [0.9]) for i in range(3)], cfg)
    assert len(tr.outcomes) == 1


def test_rollout_utilities_are_reward_sums_and_transitions_replay():
    cfg = sym_config(dropouts_enabled=True)
    rng = np.random.default_rng(3)
    prices = rng.uniform(0.8, 1.0, size=(4, 3))
    tr = rollout(open_loop_profile(prices), cfg)
    u = np.zeros(3)
    for o in tr.outcomes:
        u = u + o.rewards
    assert np.array_equal(u, tr.utilities)
    for t, o in enumerate(tr.outcomes):
        nxt, again = step(tr.states[t], o.prices, cfg)
        assert np.array_equal(nxt.demands, tr.states[t + 1].demands)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.8, 1.2), min_size=12, max_size=12), st.booleans())
def test_rollout_invariants(flat, dropouts):
    cfg = sym_config(dropouts_enabled=dropouts, p_max=1.2)
    prices = np.array(flat).reshape(4, 3)
    try:
        tr = rollout(open_loop_profile(prices), cfg)
    except AllFirmsExit:
        return
    exited = set()
    for t, o in enumerate(tr.outcomes):
        s = tr.states[t]
        assert abs(o.price_deltas[s.active].sum()) <= 1e-12
        for i in exited:
            assert tr.states[t].demands[i] == 0.0 and o.rewards[i] == 0.0 and o.quantities[i] == 0.0
        exited |= o.exits
        if not dropouts:
            assert abs(tr.states[t + 1].demands.sum() - s.demands.sum()) <= 1e-12
    again = rollout(open_loop_profile(prices), cfg)
    assert np.array_equal(again.prices, tr.prices) and np.array_equal(again.utilities, tr.utilities)


def test_config_validation():
    with pytest.raises(ConfigError):
        MarketConfig(3, 4, (0.8, 0.8, 2.0), (1, 1, 1), p_max=1.0)
    with pytest.raises(ConfigError):
        MarketConfig(0, 4, (), ())
    with pytest.raises(ConfigError):
        MarketConfig(1, 4, (0.5,), (-1.0,))


def test_default_price_cap():
    cfg = sym_config()
    assert cfg.demand_cap == pytest.approx(np.sqrt(3))
    assert cfg.price_cap == pytest.approx((np.sqrt(3) + 0.8) / 2)


def test_config_roundtrip(tmp_path):
    cfg = MarketConfig(3, 4, (0.51, 0.8, 0.8), (1.0, 1.0, 1.0), True, Information.FULL, None)
    path = tmp_path / "cfg.yaml"
    dump_config(cfg, path)
    assert load_config(path) == cfg
    assert MarketConfig.from_dict(cfg.to_dict()) == cfg


def test_trajectory_csv(tmp_path):
    cfg = sym_config(dropouts_enabled=True)
    prices = np.array([[0.8, 0.8, 1.2]] * 4)
    tr = rollout(open_loop_profile(prices), cfg)
    path = tmp_path / "t.csv"
    tr.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "stage,agent,active,demand,price,quantity,reward,exited_this_stage"
    assert len(lines) == 1 + 4 * 3


def test_batched_observation_policy():
    pol = OpenLoopPolicy(0, [0.81, 0.82])
    out = pol(Observation(2, np.ones((5, 3)), np.ones((5, 3), bool)))
    assert out.shape == (5,) and np.all(out == 0.82)
