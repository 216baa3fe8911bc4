import numpy as np
import pytest

from cfode import autodiff as ad
from cfode.model import (CfOdeParams, decode, encode, encode_batch, grid_index, init_model,
                         learnable_std_decode, predict_batch, predict_outcomes, rollout, sample_path)
from cfode.simulators import SimConfig, simulate_units


def zero_group(model, prefix):
    for k in model.store.names():
        if k.startswith(prefix + "."):
            model.store.params[k][...] = 0.0


def small_model(**kw):
    base = dict(obs_dim=1, latent_dim=4, t_star=5.0, horizon=15.0, n_steps=100, sigma_sde=0.1,
                sigma_y=0.05, treat_dim=2, seed=0)
    base.update(kw)
    return init_model(**base)


@pytest.fixture(scope="module")
def episodes():
    return simulate_units(SimConfig(n_episodes=4, seed=11), range(4))


def test_zero_encoder_gives_zero(episodes):
    m = small_model()
    zero_group(m, "encoder")
    e = episodes[0]
    assert np.array_equal(encode(m, e.pre_times, e.pre_values), np.zeros(4))


def test_wide_encoder_reads_out_to_latent(episodes):
    m = small_model(encoder_hidden=9)
    assert "readout" in m.specs and "readout" not in small_model().specs
    e = episodes[0]
    assert encode(m, e.pre_times, e.pre_values).shape == (4,)


def test_encode_preconditions():
    m = small_model()
    with pytest.raises(ValueError, match="at least one"):
        encode(m, np.array([]), np.zeros((0, 1)))
    with pytest.raises(ValueError, match="increasing"):
        encode(m, np.array([2.0, 1.0]), np.zeros((2, 1)))
    with pytest.raises(ValueError, match="t_star"):
        encode(m, np.array([1.0, 5.0]), np.zeros((2, 1)))


def test_encoder_is_count_sensitive():
    m = small_model()
    params = m.store.bind()
    step = np.array([[[0.7, 1.0, 0.0]]])
    one = encode_batch(m, params, step, np.ones((1, 1, 1))).value
    two = encode_batch(m, params, np.concatenate([step, step]), np.ones((2, 1, 1))).value
    assert not np.allclose(one, two)


def test_filler_steps_change_sequence_length(episodes):
    from cfode.model import encoder_inputs
    e = episodes[0]
    plain = small_model()
    filled = small_model(encoder_step=0.5)
    x0, _ = encoder_inputs(plain, [e.pre_times], [e.pre_values])
    x1, _ = encoder_inputs(filled, [e.pre_times], [e.pre_values])
    assert x1.shape[0] == x0.shape[0] + 9
    assert x1[:, 0, 1].sum() == len(e.pre_times)          # masks count real observations
    assert np.all(x1[x1[:, 0, 1] == 0, 0, 0] == 0)       # filler values are zero
    assert x1[:-1, 0, 2].sum() + x1[-1, 0, 2] == pytest.approx(5.0)


def test_zero_drift_no_noise_is_constant():
    m = small_model(sigma_sde=0.0)
    zero_group(m, "drift")
    h0 = np.array([0.3, -0.2, 0.1, 0.0])
    path = sample_path(m, h0, 1, noise_seed=0)
    assert np.all(path.states == h0)
    assert np.all(np.isnan(path.kl_integrand))


def test_brownian_variance_law():
    s = 0.3
    m = small_model(sigma_sde=s, n_steps=50)
    zero_group(m, "drift")
    rows = 10_000
    noise = np.random.default_rng(0).standard_normal((50, rows, 4))
    states, _ = rollout(m, m.store.bind(), ad.constant(np.zeros((rows, 4))), np.zeros(rows, int), noise)
    for k in (10, 50):
        var = states[k].value.var(axis=0)
        np.testing.assert_allclose(var, s ** 2 * k * m.dtau, rtol=0.05)


def test_same_seed_bit_identical():
    m = small_model()
    h0 = np.ones(4) * 0.1
    a, b = sample_path(m, h0, 0, 5, 3, 2), sample_path(m, h0, 0, 5, 3, 2)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.noise, b.noise)
    c = sample_path(m, h0, 0, 5, 3, 3)
    assert not np.array_equal(a.states, c.states)
    assert np.all(a.kl_integrand >= 0)
    assert np.allclose(np.diff(a.grid), m.dtau)


def test_treatment_validation():
    with pytest.raises(ValueError):
        sample_path(small_model(), np.zeros(4), 2, 0)


def test_zero_emission_decodes_zero():
    m = small_model()
    zero_group(m, "emit")
    path = sample_path(m, np.zeros(4), 1, 0)
    assert np.all(decode(m, path, [5.0, 10.0, 15.0]) == 0.0)


def test_identity_like_emission():
    m = small_model(latent_dim=1, hidden_layers=1)
    eps = 1e-4
    m.store.params["emit.W0"][...] = eps
    m.store.params["emit.W1"][...] = 1 / eps
    zero_group(m, "drift")
    m.store.params["emit.b0"][...] = 0
    m.store.params["emit.b1"][...] = 0
    path = sample_path(m, np.array([0.4]), 0, 1)
    np.testing.assert_allclose(decode(m, path, m.grid)[:, 0], path.states[:, 0], atol=1e-6)


def test_decode_on_grid_and_out_of_range():
    m = small_model()
    assert grid_index(m, [5.0, 5.1, 15.0]).tolist() == [0, 1, 100]
    with pytest.raises(ValueError):
        grid_index(m, [4.9])
    with pytest.raises(ValueError):
        decode(m, sample_path(m, np.zeros(4), 0, 0), [15.5])


def test_learnable_std():
    m = small_model(learnable_std=True)
    zero_group(m, "emit")
    path = sample_path(m, np.zeros(4), 1, 0)
    mu, sigma = learnable_std_decode(m, path, [5.0, 6.0])
    np.testing.assert_allclose(sigma, np.log(2) + 1e-3)
    assert np.all(mu == 0)
    with pytest.raises(RuntimeError):
        learnable_std_decode(small_model(), path, [5.0])


def test_prediction_std_conventions(episodes):
    e = episodes[1]
    assert np.all(predict_outcomes(small_model(), e, 1, n_mc=1).std == 0)
    det = small_model(sigma_sde=0.0)
    assert np.all(predict_outcomes(det, e, 0, n_mc=5).std == 0)
    p = predict_outcomes(small_model(sigma_sde=0.5), e, 0, n_mc=5)
    assert np.all(p.std >= 0) and p.std.max() > 0


def test_batch_prediction_matches_single_paths(episodes):
    m = small_model(sigma_sde=0.3)
    e = episodes[2]
    batch = predict_batch(m, episodes, 1, n_mc=3, seed=4)
    h = encode(m, e.pre_times, e.pre_values)
    for s in range(3):
        path = sample_path(m, h, 1, 4, e.episode_id, s)
        np.testing.assert_allclose(batch[s, 2], decode(m, path, m.grid), atol=1e-12)


def test_zeroed_treatment_input_makes_arms_identical(episodes):
    m = small_model(sigma_sde=0.2)
    zero_group(m, "treat")
    a = predict_batch(m, episodes, 0, n_mc=2, seed=1)
    b = predict_batch(m, episodes, 1, n_mc=2, seed=1)
    assert np.array_equal(a, b)
    m2 = small_model(sigma_sde=0.2)
    assert not np.array_equal(predict_batch(m2, episodes, 0, 2, 1), predict_batch(m2, episodes, 1, 2, 1))


def test_euler_first_order_convergence(episodes):
    e = episodes[0]
    base = small_model(sigma_sde=0.0, n_steps=100, latent_dim=3)

    def final(n):
        m = CfOdeParams(store=base.store, obs_dim=1, latent_dim=3, treat_dim=2, hidden_layers=2,
                        t_star=5.0, horizon=15.0, n_steps=n, sigma_sde=0.0, sigma_y=0.05)
        return predict_batch(m, [e], 1, n_mc=1)[0, 0, -1, 0]

    ref = final(100 * 64)
    ratio = abs(final(100) - ref) / abs(final(200) - ref)
    assert 1.5 <= ratio <= 2.5


def test_mc_mean_stability():
    m = small_model(sigma_sde=0.3)
    eps = simulate_units(SimConfig(n_episodes=30, seed=12), range(30))
    s100 = predict_batch(m, eps, 1, n_mc=100, seed=2)
    s50 = s100[:50]
    se = s50.std(axis=0, ddof=1) / np.sqrt(50)
    diff = np.abs(s100.mean(axis=0) - s50.mean(axis=0))
    assert np.mean(diff <= 2 * se + 1e-12) >= 0.95


@pytest.mark.parametrize("encoder_hidden", [0, 7])
def test_checkpoint_roundtrip_bit_identical(tmp_path, episodes, encoder_hidden):
    m = small_model(stats={"mean": np.array([0.1]), "std": np.array([0.6])}, encoder_step=0.25,
                    encoder_hidden=encoder_hidden)
    path = tmp_path / "m.ckpt"
    m.save(path)
    m2 = CfOdeParams.load(path)
    assert m2.hyperparams() == m.hyperparams()
    a = predict_outcomes(m, episodes[0], 1, n_mc=4, seed=9)
    b = predict_outcomes(m2, episodes[0], 1, n_mc=4, seed=9)
    assert np.array_equal(a.samples, b.samples)


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        small_model(sigma_y=0.0)
    with pytest.raises(ValueError):
        small_model(sigma_sde=-1.0)
