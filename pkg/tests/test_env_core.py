import itertools

import numpy as np
import pytest

from config import ChannelModel, DeviceConfig
from env_core import (DOWN, LEFT, RIGHT, STAY, UP, GridWorld, aou_step, associate, channel_gain,
                      check_constraints, distance, fading_power, flight_time, rate, reset, step)
from errors import ChannelDomainError, ConfigError, EpisodeStateError
from seeding import make_rng

DET = ChannelModel(deterministic=True)


# ---------- channel ----------

def test_distance_includes_altitude():
    assert distance((0, 0), 90.0, (0, 0)) == 90.0
    assert distance((300, 100), 0.0, (0, 500)) == pytest.approx(500.0)


def test_rate_matches_hand_computation():
    dev = DeviceConfig(id=0, pos=(0, 0), power=1.0, bandwidth=1500)
    r = rate(DET, dev, (0, 0), 100.0)
    assert r == pytest.approx(1500 * np.log2(1 + 1e11), rel=1e-12)
    assert r == pytest.approx(5.481e4, rel=1e-3)


def test_zero_power_gives_zero_rate():
    dev = DeviceConfig(id=0, pos=(0, 0), power=0.0, bandwidth=1500)
    assert rate(DET, dev, (50, 50), 90.0) == 0.0


def test_channel_gain_undefined_at_zero_distance():
    with pytest.raises(ChannelDomainError):
        channel_gain(DET, 0.0)


def test_path_loss_exponent_is_configurable():
    ch = ChannelModel(deterministic=True, path_loss_exponent=3.0)
    assert channel_gain(ch, 10.0) == pytest.approx(1e-3)


def test_stochastic_fading_has_unit_mean():
    draws = fading_power(ChannelModel(rician_factor=10), make_rng(0, "fading"), size=200_000)
    assert draws.mean() == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ValueError):
        fading_power(ChannelModel(), None)


# ---------- association / AoU ----------

def test_associate_picks_best_eligible_uav():
    assert associate(np.array([[5e4, 6e4]]), 4e4).tolist() == [[0, 1]]
    assert associate(np.array([[5e4, 6e4]]), 7e4).tolist() == [[0, 0]]
    assert associate(np.array([[6e4, 6e4]]), 1e4).tolist() == [[1, 0]]


def test_associate_rows_hold_at_most_one():
    rates = make_rng(1, "rates").uniform(0, 1e5, size=(30, 4))
    a = associate(rates, 5e4)
    assert set(np.unique(a)) <= {0, 1}
    assert (a.sum(axis=1) <= 1).all()
    assert ((a == 1) <= (rates >= 5e4)).all()


def test_aou_step_examples():
    assert aou_step(np.array([3, 0]), np.array([[1], [0]])).tolist() == [0, 1]
    assert aou_step(np.array([4]), np.array([[0, 0]])).tolist() == [5]


@pytest.mark.parametrize("T", range(1, 11))
def test_aou_recursion_matches_closed_form(T):
    for schedule in itertools.product((0, 1), repeat=T):
        age = np.array([0])
        for t in range(1, T + 1):
            age = aou_step(age, np.array([[schedule[t - 1]]]))
            served = [k for k in range(t) if schedule[k]]
            expected = t - (served[-1] + 1) if served else t
            assert int(age[0]) == expected


def test_flight_time():
    assert flight_time([(0, 0), (0, 1), (1, 1)], 200.0, 20.0) == pytest.approx(20.0)
    assert flight_time([(2, 2)], 200.0, 20.0) == 0.0


# ---------- dynamics ----------

def test_reset_is_deterministic(tiny):
    s1, o1 = reset(tiny)
    s2, o2 = reset(tiny)
    assert s1.slot == 0 and not s1.done
    assert (s1.uav_cells == s2.uav_cells).all() and (o1 == o2).all()
    assert s1.aou.sum() == 0


def test_invalid_scenario_dict_raises_config_error():
    with pytest.raises(ConfigError):
        GridWorld({"horizon": 0})


def test_moves_and_boundary_clamp(tiny):
    world = GridWorld(tiny)
    s, _ = world.reset()
    assert world.step(s, [LEFT]).next_state.uav_cells.tolist() == [[0, 0]]
    assert world.step(s, [DOWN]).next_state.uav_cells.tolist() == [[0, 0]]
    assert world.step(s, [RIGHT]).next_state.uav_cells.tolist() == [[1, 0]]
    assert world.step(s, [UP]).next_state.uav_cells.tolist() == [[0, 1]]
    assert world.step(s, [STAY]).next_state.uav_cells.tolist() == [[0, 0]]


def test_invalid_action_rejected(tiny):
    world = GridWorld(tiny)
    s, _ = world.reset()
    with pytest.raises(ValueError):
        world.step(s, [7])
    with pytest.raises(ValueError):
        world.step(s, [0, 0])


def test_step_after_done_raises(tiny):
    world = GridWorld(tiny)
    s, _ = world.reset()
    for _ in range(tiny.horizon):
        s = world.step(s, [STAY]).next_state
    assert s.done
    with pytest.raises(EpisodeStateError):
        world.step(s, [STAY])


def test_staying_home_accumulates_age(tiny):
    world = GridWorld(tiny)
    trace = world.replay([[STAY]] * tiny.horizon)
    totals = [int(r.aou.sum()) for r in trace.records]
    assert totals == [2, 4, 6, 8, 10]
    # nothing served and 400 m short of the final cell at T
    assert trace.records[-1].reward == pytest.approx(-0.3 * 10 / tiny.horizon - 0.4 * 400.0 / np.hypot(600.0, 600.0))


def test_serving_resets_age_next_slot(tiny):
    world = GridWorld(tiny)
    trace = world.replay([[RIGHT], [RIGHT], [STAY], [LEFT], [LEFT]])
    assert trace.records[1].assoc[:, 0].tolist() == [1, 0]   # device 0 served at slot 2
    assert trace.records[2].aou.tolist() == [0, 3]
    assert trace.records[1].data_bits > 0 and trace.records[0].data_bits == 0
    assert check_constraints(trace, world).terminal_distances[0] == pytest.approx(400.0)


def test_hovering_over_the_final_device(tiny):
    world = GridWorld(tiny)
    trace = world.replay([[UP], [UP], [STAY], [STAY], [STAY]])
    assert [int(r.assoc[1, 0]) for r in trace.records] == [0, 1, 1, 1, 1]
    assert [r.reward for r in trace.records] == pytest.approx([-0.12, 0.06, 0.12, 0.06, 0.0], abs=1e-12)
    report = check_constraints(trace, world)
    assert report.terminal_met and report.passed


def test_reward_terms_identity(small):
    world = GridWorld(small)
    rng = make_rng(0, "env")
    s, _ = world.reset(rng)
    for a in ([RIGHT, LEFT], [UP, DOWN], [STAY, STAY], [RIGHT, DOWN], [LEFT, UP], [DOWN, LEFT]):
        res = world.step(s, a, rng)
        i = res.info
        w = small.weights
        assert res.reward == pytest.approx(w.data * i.data_term - w.aou * i.aou_term - w.terminal * i.terminal_term,
                                           abs=1e-12)
        assert i.data_bits == pytest.approx(i.data_term * world.rate_norm * world.slot_duration)
        if res.next_state.slot < small.horizon:
            assert i.terminal_term == 0.0
        s = res.next_state


def test_same_seed_same_episode(small):
    world = GridWorld(small)
    actions = [[RIGHT, LEFT], [UP, DOWN]] * 3
    t1 = world.replay(actions, make_rng(9, "env"))
    t2 = world.replay(actions, make_rng(9, "env"))
    t3 = world.replay(actions, make_rng(10, "env"))
    assert [r.reward for r in t1.records] == [r.reward for r in t2.records]
    assert [r.reward for r in t1.records] != [r.reward for r in t3.records]


def test_functional_step_matches_world(tiny):
    s, _ = reset(tiny)
    res = step(s, [RIGHT], tiny)
    assert res.next_state.uav_cells.tolist() == [[1, 0]]
    assert res.per_uav_obs.shape == (1, GridWorld(tiny).obs_dim)


def test_raw_mode_uses_unit_norms(tiny):
    world = GridWorld(tiny.model_copy(update={"normalize": False}))
    assert world.rate_norm == world.aou_norm == world.dist_norm == 1.0
    pinned = GridWorld(tiny.model_copy(update={"rate_norm": 1e4}))
    assert pinned.rate_norm == 1e4


def test_rate_norm_is_best_link_at_altitude(tiny):
    world = GridWorld(tiny)
    assert world.rate_norm == pytest.approx(1500 * np.log2(1 + 1.0 / (90.0 ** 2 * 1e-15)))


# ---------- observations ----------

def test_observation_layout(small):
    world = GridWorld(small)
    s, obs = world.reset()
    assert obs.shape == (2, world.obs_dim) == (2, 5)
    assert obs[0].tolist() == [0.0, 0.0, 0.0, 1.0, 0.0]
    assert obs[1].tolist() == [1.0, 1.0, 0.0, 0.0, 1.0]
    g = world.global_state(s)
    assert g.shape == (world.global_dim,) == (2 * 2 + 3 + 1,)


def test_global_state_without_ages(small):
    world = GridWorld(small)
    s, _ = world.reset()
    s = world.step(s, [STAY, STAY], make_rng(0, "env")).next_state
    assert world.global_state(s, include_aou=False)[4:7].tolist() == [0.0, 0.0, 0.0]


def test_observation_without_time(tiny):
    world = GridWorld(tiny.model_copy(update={"local_time": False}))
    assert world.obs_dim == 3


# ---------- traces / audit ----------

def test_trace_frame_and_replay_oracle(small):
    world = GridWorld(small)
    actions = [[RIGHT, LEFT], [UP, DOWN], [STAY, STAY], [LEFT, RIGHT], [DOWN, UP], [STAY, STAY]]
    trace = world.replay(actions, make_rng(2, "env"))
    frame = world.trace_frame(trace)
    assert len(frame) == small.horizon * small.n_uavs
    assert list(frame.columns) == ["slot", "uav_id", "x", "y", "device_id_served", "rate", "reward", "total_aou"]
    logged = frame.groupby("slot")["reward"].first().to_numpy()
    assert np.allclose(world.rewards_from_frame(frame), logged, atol=1e-9, rtol=0)
    assert np.allclose(world.recompute_rewards(trace), logged, atol=1e-12, rtol=0)


def test_constraint_report_for_legal_episode(small):
    world = GridWorld(small)
    trace = world.replay([[RIGHT, LEFT]] * 6, make_rng(4, "env"))
    report = check_constraints(trace, world)
    assert report.passed
    assert report.rate_violations == report.multi_server_violations == 0
    assert report.x_violations == report.y_violations == 0
    assert report.flight_times[0] <= report.flight_time_limit
    assert report.terminal_distances[0] == pytest.approx(400.0)
    assert not report.terminal_met
    assert report.to_dict()["passed"] is True


def test_constraint_report_flags_tampered_trace(tiny):
    world = GridWorld(tiny)
    trace = world.replay([[STAY]] * 5)
    trace.records[0].assoc = np.array([[2], [0]], dtype=np.int8)
    trace.records[1].uav_cells = np.array([[3, 0]])
    report = check_constraints(trace, world)
    assert report.non_binary_entries == 1
    assert report.x_violations == 1
    assert not report.passed
