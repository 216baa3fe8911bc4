import math

import numpy as np
import pytest

from cfode import constants
from cfode.simulators import (SYSTEMS, SimConfig, generate_dataset, injected_noise, load_dataset,
                              rk4_integrate, sample_observation_times, sigmoid, simulate_cardio,
                              simulate_dexa, simulate_oscillator, simulate_units, split_ids)
from cfode.serialization import dumps_record, loads_record


def crossing_times(t, x):
    s = np.sign(x)
    idx = np.where(s[:-1] * s[1:] < 0)[0]
    return t[idx] - x[idx] * (t[idx + 1] - t[idx]) / (x[idx + 1] - x[idx])


def test_rk4_constant():
    t, x = rk4_integrate(lambda t, x: np.zeros_like(x), np.array([3.0]), 0.0, 1.0, 0.1)
    assert np.all(x == 3.0)


def test_rk4_exponential():
    _, x = rk4_integrate(lambda t, x: x, np.array([1.0]), 0.0, 1.0, 1e-3)
    assert abs(x[-1, 0] - math.e) < 1e-9


def test_rk4_lands_on_t1():
    t, _ = rk4_integrate(lambda t, x: -x, np.array([1.0]), 0.0, 1.05, 0.1)
    assert t[-1] == 1.05 and np.all(np.diff(t) > 0)
    assert t[-2] == pytest.approx(1.0)


def test_rk4_rejects_bad_args():
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, x: x, np.ones(1), 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, x: x, np.ones(1), 1.0, 1.0, 0.1)


def test_rk4_blowup_reports_time():
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError, match="t="):
        rk4_integrate(lambda t, x: x ** 3, np.array([10.0]), 0.0, 5.0, 0.1)


def test_pendulum_small_angle_period():
    osc = SYSTEMS["oscillator"]
    p = {"theta0": np.array([0.05]), "length": np.array([1.0])}
    t, x = rk4_integrate(osc.deriv_fn(p, False, 5.0), osc.initial_state(p), 0.0, 20.0, 1e-3)
    c = crossing_times(t, x[:, 0, 0])
    period = 2 * np.mean(np.diff(c))
    assert abs(period / (2 * math.pi * math.sqrt(1.0 / constants.GRAVITY)) - 1) < 0.01


def test_oscillator_propensity_examples():
    osc = SYSTEMS["oscillator"]
    p1 = {"theta0": np.array([1.0, 1.5])}
    p_treat = osc.propensity(p1, None, 8.0)
    assert p_treat[0] == pytest.approx(0.5)
    assert 1 - p_treat[1] == pytest.approx(0.982, abs=1e-3)
    assert np.all(osc.propensity({"theta0": np.linspace(0.5, 1.5, 7)}, None, 0.0) == 0.5)


def test_cardio_examples():
    cardio = SYSTEMS["cardio"]
    assert cardio.fluid(5.0) == pytest.approx(5.0)
    assert cardio.fluid(-1.0) == 0.0
    x_star = np.array([[30.0, 80.0, 10.0, 0.5]])
    assert cardio.propensity({}, x_star, 8.0)[0] == pytest.approx(0.5)


def test_cardio_untreated_stroke_volume_constant():
    e = simulate_cardio(SimConfig(dataset="cardio", n_episodes=1, seed=3), 0)
    assert e.sim_params  # parameters recorded
    cfg = SimConfig(dataset="cardio", n_episodes=1, seed=3)
    cardio = SYSTEMS["cardio"]
    p = {k: np.array([v]) for k, v in e.sim_params.items()}
    x0 = cardio.initial_state(p)
    _, x = rk4_integrate(cardio.deriv_fn(p, False, cfg.t_star), x0, 0.0, cfg.horizon, 0.01)
    assert np.all(x[:, 0, 0] == x0[0, 0])


def test_dexa_examples():
    dexa = SYSTEMS["dexa"]
    prop = dexa.propensity({"k_dex": np.array([8.5, 16.0])}, None, 8.0)
    np.testing.assert_allclose(prop, [0.5, sigmoid(0.5)])
    assert prop[1] == pytest.approx(0.622, abs=1e-3)


def test_dexa_untreated_z3_zero_and_z2_decays():
    e = simulate_dexa(SimConfig(dataset="dexa", n_episodes=1, seed=0), 0)
    dexa = SYSTEMS["dexa"]
    p = {k: np.array([v]) for k, v in e.sim_params.items()}
    z = np.array([[1.0, 0.5, 0.0, 1.0, 1.0]])
    _, traj = rk4_integrate(dexa.deriv_fn(p, False, 4.0), z, 0.0, 10.0, 0.01)
    assert np.all(traj[:, 0, 2] == 0.0)
    assert traj[-1, 0, 1] < 0.5 * np.exp(-9.0)


def test_observation_times_contract():
    cfg = SimConfig(n_episodes=1)
    counts = []
    for i in range(2000):
        pre, post = sample_observation_times(cfg, 5.0, 15.0, np.random.default_rng(i))
        assert np.all(pre < 5.0) and np.all(pre > 0.0) and np.all(np.diff(pre) > 0)
        assert len(pre) >= 3
        counts.append(len(pre))
    assert abs(np.mean(counts) / 20.0 - 1) < 0.05
    assert post[0] == 5.0 and post[-1] == 15.0
    a = sample_observation_times(cfg, 5.0, 15.0, np.random.default_rng(7))[0]
    b = sample_observation_times(cfg, 5.0, 15.0, np.random.default_rng(7))[0]
    assert np.array_equal(a, b)


def test_observation_count_mean_10k():
    cfg = SimConfig(n_episodes=1, obs_rate=12)
    rng = np.random.default_rng(0)
    n = [len(sample_observation_times(cfg, 5.0, 15.0, rng)[0]) for _ in range(10_000)]
    assert abs(np.mean(n) / 12 - 1) < 0.05


@pytest.mark.parametrize("kind", ["oscillator", "cardio", "dexa"])
def test_episode_invariants(kind):
    cfg = SimConfig(dataset=kind, n_episodes=8, seed=2)
    for e in simulate_units(cfg, range(8)):
        assert np.all(np.diff(e.obs_times) > 0)
        assert 0 < e.propensity < 1
        assert e.outcome_0.shape == e.outcome_1.shape == (len(e.eval_times), cfg.obs_dim)
        assert np.array_equal(e.post_times, e.eval_times)
        clean = e.obs_values - injected_noise(cfg, e)
        np.testing.assert_allclose(clean[~e.pre_mask], e.factual, atol=1e-12)


@pytest.mark.parametrize("kind", ["oscillator", "cardio", "dexa"])
def test_arms_agree_up_to_t_star(kind):
    cfg = SimConfig(dataset=kind, n_episodes=3, seed=5)
    for e in simulate_units(cfg, range(3)):
        # both arms start from the same state at t*, so the first grid value agrees
        np.testing.assert_array_equal(e.outcome_0[0], e.outcome_1[0])


@pytest.mark.parametrize("kind", ["oscillator", "cardio", "dexa"])
def test_rk4_halving_stability(kind):
    coarse = simulate_units(SimConfig(dataset=kind, n_episodes=10, rk4_dt=0.01), range(10))
    fine = simulate_units(SimConfig(dataset=kind, n_episodes=10, rk4_dt=0.005), range(10))
    for a, b in zip(coarse, fine):
        for arm in (0, 1):
            ya, yb = a.outcome(arm), b.outcome(arm)
            rel = np.max(np.abs(ya - yb)) / max(np.max(np.abs(yb)), 1e-12)
            assert rel < 1e-6


def test_single_unit_matches_batch():
    cfg = SimConfig(n_episodes=20, seed=4)
    batch = simulate_units(cfg, range(20))
    single = simulate_oscillator(cfg, 13)
    assert dumps_record(single.to_record()) == dumps_record(batch[13].to_record())
    with pytest.raises(ValueError):
        simulate_cardio(cfg, 0)


def test_confounding_direction():
    ds = generate_dataset(SimConfig(n_episodes=1000, seed=1))
    th = np.array([e.sim_params["theta0"] for e in ds.episodes])
    t = np.array([e.treatment for e in ds.episodes])
    assert t[th > 1].mean() < t[th < 1].mean()


def test_split_sizes_and_ood():
    ds = generate_dataset(SimConfig(n_episodes=1000, seed=1))
    assert [len(ds.splits[k]) for k in ("train", "val", "test")] == [600, 200, 200]
    ids = np.arange(100)
    prop = np.linspace(0.01, 0.99, 100)
    splits = split_ids(SimConfig(ood_fraction=0.1, seed=0), ids, prop)
    assert splits["ood"] == list(range(90, 100))
    assert not set(splits["ood"]) & set(splits["train"] + splits["val"] + splits["test"])


def test_dataset_file_roundtrip_and_determinism(tmp_path):
    cfg = SimConfig(dataset="dexa", n_episodes=30, seed=9, gamma=0)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    generate_dataset(cfg, a, tmp_path / "a.json")
    generate_dataset(cfg, b, tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    ds = load_dataset(a, tmp_path / "a.json")
    assert len(ds) == 30
    again = generate_dataset(cfg)
    for x, y in zip(ds.episodes, again.episodes):
        assert np.array_equal(x.obs_values, y.obs_values)
        assert np.array_equal(x.outcome_1, y.outcome_1)
    manifest = loads_record((tmp_path / "a.json").read_text())
    assert manifest["config"]["gamma"] == 0 and manifest["config_hash"] == cfg.config_hash()


def test_load_rejects_mismatched_manifest(tmp_path):
    generate_dataset(SimConfig(n_episodes=5, seed=1), tmp_path / "a.jsonl", tmp_path / "a.json")
    generate_dataset(SimConfig(n_episodes=5, seed=2), tmp_path / "b.jsonl", tmp_path / "b.json")
    with pytest.raises(ValueError, match="does not match"):
        load_dataset(tmp_path / "a.jsonl", tmp_path / "b.json")


def test_serialization_17_digits():
    x = 0.1 + 0.2
    text = dumps_record({"v": x, "a": np.array([1 / 3])})
    back = loads_record(text)
    assert back["v"] == x and back["a"][0] == 1 / 3
    with pytest.raises(ValueError):
        dumps_record({"v": float("nan")})


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dataset="nope")
    with pytest.raises(ValueError):
        SimConfig(gamma=-1)
    with pytest.raises(ValueError):
        SimConfig(rk4_dt=0)
