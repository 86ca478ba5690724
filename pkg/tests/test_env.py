from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from v2xwm import env as E
from v2xwm.baselines import random_schedule
from v2xwm.config import EnvConfig
from v2xwm.env import ScheduleAction, feasible

import oracles


def _random_slot(rng, V, c_u=4):
    """Random consistent (ages, stamps, inventory, choices, rates, t)."""
    t = int(rng.integers(0, 100))
    # quarter-slot ages keep every blend exactly representable in binary
    ages = rng.integers(4, 4 * (t + 2), size=V) / 4.0
    stamps = t - ages
    inv = rng.integers(0, c_u + 1, size=V)
    act = random_schedule(EnvConfig(n_vehicles=V), None, rng)
    choices = act.to_choices(V)
    rates = rng.choice([0.0, 0.5, 1.0, 1.7, 2.0, 3.2, 4.0, 6.5, 11.0], size=(V + 1, V + 1))
    return ages, stamps, inv, choices, rates, t


# ------------------------------------------------------------- feasibility

def test_feasible_examples():
    assert feasible(ScheduleAction(v2i=(1,), v2v=((2, 3),)), 5)
    assert not feasible(ScheduleAction(v2i=(1,), v2v=((1, 2),)), 5)
    assert not feasible(ScheduleAction(v2v=((2, 3), (3, 4))), 5)
    assert not feasible(ScheduleAction(v2v=((2, 2),)), 5)
    assert not feasible(ScheduleAction(v2i=(0, 1)), 5)       # single RSU beam
    assert not feasible(ScheduleAction(v2i=(5,)), 5)
    assert feasible(ScheduleAction(), 5)


def test_choice_round_trip():
    act = ScheduleAction(v2i=(2,), v2v=((0, 1), (3, 4)))
    ch = act.to_choices(5)
    assert ch.tolist() == [0, 2, 1, 0, 5]
    assert ScheduleAction.from_choices(ch) == act
    enc = act.encode(5)
    assert enc.shape == (35,) and enc.sum() == 5
    with pytest.raises(E.InfeasibleActionError):
        ScheduleAction(v2i=(1,), v2v=((1, 2),)).to_choices(5)


# --------------------------------------------------------------- CAoI

def test_caoi_full_delivery_gives_age_one():
    rates = np.zeros((3, 3))
    rates[2, 0] = 9.0
    age, stamp, inv = E.caoi_update([7.0, 3.0], [3.0, 7.0], [4, 4],
                                    [1, 0], rates, 10, 4)
    assert age[0] == 1.0 and stamp[0] == 10.0 and inv[0] == 4
    assert age[1] == 4.0


def test_caoi_half_delivery_blend():
    t = 20
    rates = np.zeros((3, 3))
    rates[2, 0] = 2.0
    age, stamp, _ = E.caoi_update([4.0, 1.0], [t - 4.0, t - 1.0], [4, 4], [1, 0], rates, t, 4)
    assert age[0] == 3.0 and stamp[0] == t - 2.0


def test_caoi_v2v_uses_source_stamp_and_inventory():
    t = 30
    rates = np.zeros((4, 4))
    rates[0, 1] = 10.0
    ages = np.array([2.0, 9.0, 5.0])
    age, stamp, inv = E.caoi_update(ages, t - ages, [2, 4, 4], [0, 2, 0], rates, t, 4)
    # two of four packets, generation t-2 blended with t-9
    assert stamp[1] == 0.5 * (t - 2) + 0.5 * (t - 9)
    assert age[1] == t + 1 - stamp[1] and inv[1] == 2


def test_caoi_stale_delivery_is_ignored():
    t = 30
    rates = np.full((4, 4), 10.0)
    ages = np.array([9.0, 2.0, 5.0])
    age, stamp, inv = E.caoi_update(ages, t - ages, [4, 1, 4], [0, 2, 0], rates, t, 4)
    assert age[1] == 3.0 and inv[1] == 1


@pytest.mark.parametrize("use_numba", [True, False])
def test_caoi_matches_exact_oracle(use_numba):
    rng = np.random.default_rng(0)
    for _ in range(2000):
        V = int(rng.integers(2, 5))
        ages, stamps, inv, choices, rates, t = _random_slot(rng, V)
        got_age, got_stamp, got_inv = E.caoi_update(ages, stamps, inv, choices, rates, t, 4,
                                                    use_numba=use_numba)
        want_age, want_inv = oracles.caoi_brute(ages, inv, choices, rates, t, 4)
        assert [Fraction(a) for a in got_age] == want_age
        assert got_inv.tolist() == want_inv
        np.testing.assert_array_equal(got_age, t + 1 - got_stamp)


def test_caoi_numba_numpy_parity():
    rng = np.random.default_rng(1)
    for _ in range(500):
        V = int(rng.integers(2, 9))
        args = _random_slot(rng, V)
        a = E.caoi_update(*args, 4, use_numba=True)
        b = E.caoi_update(*args, 4, use_numba=False)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_caoi_age_bounds(seed):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(2, 7))
    ages, stamps, inv, choices, rates, t = _random_slot(rng, V)
    age, _, new_inv = E.caoi_update(ages, stamps, inv, choices, rates, t, 4)
    assert np.all(age >= 1.0) and np.all(age <= ages + 1.0)
    assert np.all((new_inv >= 0) & (new_inv <= 4))
    idle = choices == 0
    np.testing.assert_array_equal(age[idle], ages[idle] + 1.0)


# -------------------------------------------------------------- reward

def test_reward_values():
    assert E.reward_from_ages(np.ones(4), 8.0) == -1.0
    assert E.reward_from_ages([10.0], 8.0) == -12.0
    assert E.reward_from_ages([8.0, 8.0], 8.0) == -8.0
    assert E.reward_from_ages([2.0, 12.0], 8.0) == -(2.0 + 16.0) / 2


# ------------------------------------------------------- reset and step

def test_reset_initial_state():
    cfg = EnvConfig(n_vehicles=8)
    state, obs = E.reset(cfg, 3)
    assert state.t == 0
    np.testing.assert_array_equal(state.age, 1.0)
    np.testing.assert_array_equal(state.inventory, cfg.packets_per_slot)
    np.testing.assert_array_equal(state.age, state.t - state.stamp)
    assert np.all((state.speed >= 15.0) & (state.speed <= 20.0))
    assert np.all((state.x >= 0) & (state.x < cfg.road_length))
    assert obs.flatten().shape == (480,) == (cfg.obs_dim,)
    assert np.all(np.isfinite(obs.flatten()))


def test_reset_rejects_bad_config():
    with pytest.raises(ValueError):
        E.reset(EnvConfig(n_vehicles=1), 0)
    with pytest.raises(ValueError):
        E.reset(EnvConfig(road_length=0.0), 0)


def _rollout(cfg, seed, policy_seed):
    state, obs = E.reset(cfg, seed)
    rng = np.random.default_rng(policy_seed)
    done, steps = False, 0
    while not done:
        prev = state
        state, obs, r, done = E.step(cfg, state, random_schedule(cfg, state, rng))
        steps += 1
        yield prev, state, obs, r, done, steps


def test_episode_invariants_and_length():
    cfg = EnvConfig()
    last = None
    for prev, state, obs, r, done, steps in _rollout(cfg, 11, 12):
        assert state.t == prev.t + 1
        np.testing.assert_allclose(state.age, state.t - state.stamp, rtol=0, atol=1e-12)
        assert np.all(state.age >= 1.0) and np.all(state.age <= prev.age + 1.0)
        assert np.all((state.inventory >= 0) & (state.inventory <= cfg.packets_per_slot))
        assert np.all((state.x >= 0) & (state.x < cfg.road_length))
        assert r == E.reward_from_ages(state.age, cfg.age_max)
        assert done == (state.t == cfg.period)
        last = steps
    assert last == cfg.period


def test_step_is_deterministic_and_pure():
    cfg = EnvConfig()
    a = [(s.age.copy(), r) for _, s, _, r, _, _ in _rollout(cfg, 5, 6)]
    b = [(s.age.copy(), r) for _, s, _, r, _, _ in _rollout(cfg, 5, 6)]
    for (x, rx), (y, ry) in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert rx == ry
    state, _ = E.reset(cfg, 1)
    snap = state.copy()
    E.step(cfg, state, ScheduleAction())
    np.testing.assert_array_equal(state.age, snap.age)
    assert state.t == snap.t


def test_step_rejects_infeasible_and_finished():
    cfg = EnvConfig()
    state, _ = E.reset(cfg, 0)
    with pytest.raises(E.InfeasibleActionError):
        E.step(cfg, state, ScheduleAction(v2i=(0, 1)))
    state.t = cfg.period
    with pytest.raises(RuntimeError):
        E.step(cfg, state, ScheduleAction())


def test_mobility_wraps():
    cfg = EnvConfig()
    state, _ = E.reset(cfg, 2)
    state.x[:] = cfg.road_length - 0.5
    new, *_ = E.step(cfg, state, ScheduleAction())
    np.testing.assert_allclose(new.x, state.speed * cfg.slot_s - 0.5)


@pytest.mark.parametrize("mode", ["iid", "markov", "fixed"])
def test_los_bitmap_structure(mode):
    cfg = EnvConfig(blockage_mode=mode)
    state, _ = E.reset(cfg, 4)
    for _ in range(5):
        state, *_ = E.step(cfg, state, ScheduleAction())
        los = state.los
        V = cfg.n_vehicles
        assert not los.diagonal().any() and not los[:, V].any()
        np.testing.assert_array_equal(los[:V, :V], los[:V, :V].T)


def test_fixed_blockage_is_deterministic_in_positions():
    cfg = EnvConfig(blockage_mode="fixed")
    s1, _ = E.reset(cfg, 9)
    s2, _ = E.reset(cfg, 9)
    s2.rng = np.random.default_rng(123)
    a, *_ = E.step(cfg, s1, ScheduleAction())
    b, *_ = E.step(cfg, s2, ScheduleAction())
    np.testing.assert_array_equal(a.los, b.los)


# ------------------------------------------------------- normalisation

def test_normalisation_fixed_points_and_bounds():
    cfg = EnvConfig()
    state, obs = E.reset(cfg, 0)
    obs.ages[:] = cfg.age_max
    obs.locations[0] = (0.0, 7.0, 0.0)
    vec = E.normalize_observation(obs, cfg)
    assert np.all(vec[:cfg.n_vehicles] == 0.0)
    off = cfg.n_vehicles + 7 * cfg.n_vehicles ** 2
    assert vec[off] == 0.0 and vec[off + 1] == 0.0
    for _, s, o, *_ in _rollout(cfg, 7, 8):
        v = E.normalize_observation(o, cfg)
        assert v.shape == (cfg.obs_dim,) and np.all(np.abs(v) <= 1.0)


def test_normalisation_round_trip():
    cfg = EnvConfig()
    for _, s, obs, *_ in _rollout(cfg, 3, 4):
        if np.any(obs.ages > 2 * cfg.age_max):
            continue
        obs.tracing[..., 6] = np.clip(obs.tracing[..., 6], *cfg.gain_window_db)
        back = E.denormalize_observation(E.normalize_observation(obs, cfg), cfg)
        np.testing.assert_allclose(back.ages, obs.ages, atol=1e-9)
        np.testing.assert_allclose(back.tracing, obs.tracing, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(back.locations, obs.locations, atol=1e-9)


# ------------------------------------------------------------- traces

def test_trace_records_and_round_trip(tmp_path):
    cfg = EnvConfig()
    env = E.V2XEnv(cfg)
    env.reset(0)
    rng = np.random.default_rng(1)
    rewards = []
    done = False
    while not done:
        _, r, done = env.step(random_schedule(cfg, env.state, rng))
        rewards.append(r)
    assert len(env.trace) == cfg.period
    rec = env.trace[-1]
    assert set(rec) == {"slot", "ages", "action", "reward", "los"}
    assert rec["slot"] == cfg.period and rec["reward"] == rewards[-1]
    path = tmp_path / "t.jsonl"
    E.write_trace(env.trace, path)
    assert E.read_trace(path) == env.trace
