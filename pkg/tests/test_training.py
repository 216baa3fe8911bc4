import math

import numpy as np
import pytest
from scipy.stats import norm

from cfode import autodiff as ad
from cfode.model import init_model, sample_path
from cfode.simulators import Dataset, Episode, SimConfig, generate_dataset
from cfode.training import (TrainConfig, batch_objective, gaussian_loglik, grad_check, path_kl,
                            train, write_curve)


def zero_group(model, prefix):
    for k in model.store.names():
        if k.startswith(prefix + "."):
            model.store.params[k][...] = 0.0


# -- gaussian_loglik ------------------------------------------------------------


def test_loglik_at_mode():
    y = np.zeros((7, 1))
    assert gaussian_loglik(y, 1.0, y) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gaussian_loglik(y, 1.0, y) == pytest.approx(-0.9189385332, abs=1e-9)


def test_loglik_doubling_sigma():
    y = np.ones((5, 2))
    a = gaussian_loglik(y, 0.3, y)
    b = gaussian_loglik(y, 0.6, y)
    assert a - b == pytest.approx(math.log(2.0), abs=1e-12)


def test_loglik_matches_direct_sum(rng):
    means = rng.normal(size=(3, 6, 2))
    y = rng.normal(size=(6, 2))
    mask = (rng.random((6, 1)) > 0.3).astype(float)
    mask[0] = 1.0
    s = 0.7
    direct = sum(norm.logpdf(y[p, d], means[k, p, d], s) * mask[p, 0]
                 for k in range(3) for p in range(6) for d in range(2)) / 3
    assert gaussian_loglik(means, s, y, mask, reduce="sum") == pytest.approx(direct, rel=1e-12)
    n_obs = mask.sum() * 2
    assert gaussian_loglik(means, s, y, mask) == pytest.approx(direct / n_obs, rel=1e-12)


def test_loglik_rejects_misalignment():
    with pytest.raises(ValueError, match="misalignment"):
        gaussian_loglik(np.zeros((2, 5, 1)), 1.0, np.zeros((4, 1)))


# -- path_kl ------------------------------------------------------------------


def test_kl_zero_drift_is_exactly_zero():
    m = init_model(obs_dim=1, latent_dim=3, sigma_sde=0.2, seed=1)
    zero_group(m, "drift")
    path = sample_path(m, np.ones(3), 1, noise_seed=0)
    assert path_kl(path) == 0.0


def test_kl_constant_drift_closed_form():
    s = 0.4
    m = init_model(obs_dim=1, latent_dim=3, sigma_sde=s, n_steps=50, seed=1)
    zero_group(m, "drift")
    c = np.array([0.3, -0.2, 0.5])
    m.store.params["drift.b2"][...] = c
    path = sample_path(m, np.zeros(3), 0, noise_seed=3)
    exact = float(c @ c) / s ** 2 * (m.horizon - m.t_star)
    one_step = float(c @ c) / s ** 2 * m.dtau
    assert abs(path_kl(path) - exact) <= one_step


def test_kl_averages_over_paths():
    m = init_model(obs_dim=1, latent_dim=3, sigma_sde=0.3, n_steps=20, seed=2)
    paths = [sample_path(m, np.ones(3), 0, 5, sample_index=k) for k in range(3)]
    assert path_kl(paths) == pytest.approx(np.mean([path_kl(p) for p in paths]), rel=1e-14)


def test_kl_undefined_without_diffusion():
    m = init_model(obs_dim=1, latent_dim=3, sigma_sde=0.0, seed=1)
    path = sample_path(m, np.ones(3), 0, noise_seed=0)
    with pytest.raises(ValueError, match="undefined"):
        path_kl(path)


def test_kl_riemann_refinement_small():
    # noiseless paths isolate the quadrature error of the Riemann sum
    from cfode.model import rollout
    base = init_model(obs_dim=1, latent_dim=3, sigma_sde=0.5, n_steps=200, seed=4)
    h = np.array([[0.5, -0.3, 0.2]])
    vals = []
    for n in (200, 400):
        m = init_model(obs_dim=1, latent_dim=3, sigma_sde=0.5, n_steps=n, seed=4)
        m.store = base.store.copy()
        _, drifts = rollout(m, m.store.bind(), ad.constant(h), [1], np.zeros((n, 1, 3)))
        vals.append(m.dtau * float((drifts.value ** 2).sum()) / 0.25)
    assert abs(vals[0] - vals[1]) / vals[1] < 0.02


def test_kl_gradient_ignores_emission():
    m = init_model(obs_dim=1, latent_dim=3, sigma_sde=0.3, n_steps=10, seed=5)
    ep = generate_dataset(SimConfig(n_episodes=2, seed=3, eval_step=0.1)).episodes[0]
    noise = np.random.default_rng(0).standard_normal((10, 2, 3))
    tape = ad.Tape()
    params = m.store.bind(tape)
    from cfode.model import encode_batch, encoder_inputs, rollout
    x, active = encoder_inputs(m, [ep.pre_times], [ep.pre_values])
    h = encode_batch(m, params, x, active)
    h0 = ad.matmul(np.ones((2, 1)), h)
    _, drifts = rollout(m, params, h0, [0, 1], noise)
    kl = ad.ad_sum(ad.square(drifts))
    grads = tape.backward(kl)
    for name, t in params.items():
        if name.startswith("emit."):
            assert np.array_equal(grads[t.node], np.zeros_like(t.value))
    assert any(np.any(grads[t.node] != 0) for n, t in params.items() if n.startswith("drift."))


# -- objective -----------------------------------------------------------------


def toy_dataset(value=0.4, sigma=0.2, seed=0):
    """Two units whose outcome is a constant plus N(0, sigma) noise on grid times."""
    rng = np.random.default_rng(seed)
    cfg = SimConfig(n_episodes=2, seed=seed)
    grid = cfg.t_star + 0.1 * np.arange(101)
    eps = []
    for i in range(2):
        pre = np.array([0.5, 2.0, 4.0])
        post = grid[::4]
        times = np.concatenate([pre, post])
        vals = value + sigma * rng.standard_normal((len(times), 1))
        eps.append(Episode(i, "oscillator", times, vals, cfg.t_star, i, grid,
                           np.full(101, value), np.full(101, value), 0.5))
    stats = {"mean": np.zeros(1), "std": np.ones(1)}
    return Dataset(cfg, eps, {"train": [0, 1], "val": [0, 1], "test": [0, 1]}, stats)


def test_constant_toy_reaches_noise_floor():
    s = 0.2
    ds = toy_dataset(sigma=s)
    cfg = TrainConfig(epochs=200, batch_size=2, lr=1e-2, lr_final=None, sigma_y=s, sigma_sde=0.05,
                      latent_dim=3, treat_dim=2, patience=1000, n_mc=2, seed=1, encoder_steps=0)
    res = train(ds, cfg)
    resid = np.concatenate([e.post_values - 0.4 for e in ds.episodes])
    floor = float(np.mean(norm.logpdf(resid, 0.0, s)))
    best = max(r["train_loglik"] for r in res.curve[-20:])
    assert best >= floor - 0.1


def test_zero_lr_keeps_parameters():
    ds = toy_dataset()
    cfg = TrainConfig(epochs=3, batch_size=1, lr=0.0, lr_final=None, latent_dim=3, treat_dim=2,
                      encoder_steps=0)
    from cfode.training import build_model
    before = build_model(ds.config, ds.stats, cfg).store.copy()
    res = train(ds, cfg)
    for k in before.names():
        assert np.array_equal(before.params[k], res.model.store.params[k])


def test_seeded_training_is_deterministic(tmp_path):
    ds = generate_dataset(SimConfig(n_episodes=12, seed=2))
    cfg = TrainConfig(epochs=2, batch_size=4, latent_dim=3, treat_dim=2, seed=3)
    a = train(ds, cfg, checkpoint_path=tmp_path / "a.ckpt")
    b = train(ds, cfg, checkpoint_path=tmp_path / "b.ckpt")
    strip = lambda c: [{k: v for k, v in r.items() if k != "wall_time"} for r in c]
    assert strip(a.curve) == strip(b.curve)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_curve_file_layout(tmp_path):
    curve = [{"epoch": 0, "train_loss": 1.5, "train_loglik": -0.2, "train_kl": 0.1,
              "val_rmse": 0.9, "wall_time": 0.01}]
    path = tmp_path / "sub" / "curve.tsv"
    write_curve(path, curve, "abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1].split("\t") == ["epoch", "train_loss", "train_loglik", "train_kl", "val_rmse", "wall_time"]
    assert lines[2].split("\t")[0] == "0"


def test_no_diffusion_config():
    cfg = TrainConfig(no_diffusion=True)
    assert cfg.sigma_sde == 0.0 and cfg.kl_scale == 0.0
    with pytest.raises(ValueError, match="kl_scale"):
        TrainConfig(sigma_sde=0.0)


def test_config_validation():
    with pytest.raises(ValueError, match="n_mc"):
        TrainConfig(n_mc=0)
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(patience=0)


def test_lr_schedule():
    cfg = TrainConfig(epochs=11, lr=1e-2, lr_final=1e-4)
    assert cfg.lr_at(0) == pytest.approx(1e-2)
    assert cfg.lr_at(10) == pytest.approx(1e-4)
    lrs = [cfg.lr_at(e) for e in range(11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert TrainConfig(lr_final=None, lr=3e-3).lr_at(50) == 3e-3


def test_no_diffusion_objective_is_plain_likelihood():
    ds = toy_dataset()
    from cfode.training import build_model
    m = build_model(ds.config, ds.stats, TrainConfig(no_diffusion=True, latent_dim=3, treat_dim=2))
    noise = np.random.default_rng(0).standard_normal((m.n_steps, 2, 3))
    loss, terms = batch_objective(m, m.store.bind(), ds.episodes, 1, noise, 0.0)
    assert float(loss.value) == pytest.approx(-terms.loglik, rel=1e-14)
    # without diffusion the noise draws are irrelevant
    loss2, _ = batch_objective(m, m.store.bind(), ds.episodes, 1, noise * 5, 0.0)
    assert float(loss2.value) == float(loss.value)


def test_off_grid_observations_rejected():
    ds = toy_dataset()
    e = ds.episodes[0]
    e.obs_times[-1] -= 0.037
    from cfode.training import build_model
    m = build_model(ds.config, ds.stats, TrainConfig(latent_dim=3, treat_dim=2))
    noise = np.zeros((m.n_steps, 2, 3))
    with pytest.raises(ValueError, match="grid"):
        batch_objective(m, m.store.bind(), ds.episodes, 1, noise, 1.0)


# -- grad_check ------------------------------------------------------------------


def test_grad_check_passes():
    rep = grad_check()
    assert rep.passed, rep.per_group
    assert set(rep.per_group) == {"encoder", "drift", "treat", "emit"}


def test_grad_check_learnable_std():
    from cfode.training import _tiny_setup
    model, ep = _tiny_setup(0, learnable_std=True)
    assert grad_check(model, ep).max_rel_error < 1e-4


def test_grad_check_with_readout():
    from cfode.training import _tiny_setup
    model, ep = _tiny_setup(0, encoder_hidden=5)
    assert model.store.params["encoder.Wh"].shape == (5, 15)
    assert model.store.params["readout.W1"].shape == (3, 3)
    rep = grad_check(model, ep)
    assert rep.passed, rep.per_group
    assert "readout" in rep.per_group


def test_grad_check_refuses_unfrozen_noise():
    with pytest.raises(ValueError, match="frozen"):
        grad_check(frozen_noise=False)


def test_grad_check_empty_model():
    from cfode.training import _tiny_setup
    model, ep = _tiny_setup(0)
    model.store.params.clear()
    rep = grad_check(model, ep)
    assert rep.passed and rep.note
