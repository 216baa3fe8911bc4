"""Latent neural SDE for potential-outcome trajectories.

Pipeline for one unit and one treatment arm:

1. ``encode``: a GRU scans the pre-treatment observations (value, mask, gap)
   and a final query step at ``t_star``; the last hidden state is h(t*).
2. ``sample_path``: Euler-Maruyama on
   ``dh = f(h, u_T(t - t*)) dt + sigma_sde dW`` over ``[t*, horizon]``.
   The prior is zero-drift Brownian motion with the same diffusion, so the
   path KL integrand is ``||f||^2 / sigma_sde^2``.
3. ``decode``: an MLP maps grid states to outcome means (nearest grid
   state for each evaluation time).

All values handled here are standardized; see :class:`CfOdeParams.stats`.
The batched ``rollout``/``encode_batch`` helpers build tape graphs when the
parameters are bound to a tape and plain arrays otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nets import (GruSpec, MlpSpec, gru_step, init_params, load_checkpoint, mlp_forward,
                   save_checkpoint)

STD_FLOOR = 1e-3
DEFAULT_LATENT = {"oscillator": 16, "cardio": 12, "dexa": 12}


@dataclass
class CfOdeParams:
    """Weights plus the fixed hyperparameters of one CF-ODE model."""

    store: object
    obs_dim: int
    latent_dim: int
    treat_dim: int
    hidden_layers: int
    t_star: float
    horizon: float
    n_steps: int
    sigma_sde: float
    sigma_y: float
    learnable_std: bool = False
    encoder_step: float = 0.0
    encoder_hidden: int = 0
    stats: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma_y > 0:
            raise ValueError(f"sigma_y must be > 0, got {self.sigma_y}")
        if self.sigma_sde < 0:
            raise ValueError(f"sigma_sde must be >= 0, got {self.sigma_sde}")
        self.specs = build_specs(self.obs_dim, self.latent_dim, self.treat_dim,
                                 self.hidden_layers, self.learnable_std, self.encoder_hidden)

    @property
    def dtau(self):
        return (self.horizon - self.t_star) / self.n_steps

    @property
    def grid(self):
        return self.t_star + self.dtau * np.arange(self.n_steps + 1)

    @property
    def encoder(self):
        return self.specs["encoder"]

    @property
    def drift(self):
        return self.specs["drift"]

    @property
    def treat(self):
        return self.specs["treat"]

    @property
    def emit(self):
        return self.specs["emit"]

    def hyperparams(self):
        return {
            "obs_dim": self.obs_dim,
            "latent_dim": self.latent_dim,
            "treat_dim": self.treat_dim,
            "hidden_layers": self.hidden_layers,
            "t_star": self.t_star,
            "horizon": self.horizon,
            "n_steps": self.n_steps,
            "dtau": self.dtau,
            "sigma_sde": self.sigma_sde,
            "sigma_y": self.sigma_y,
            "learnable_std": self.learnable_std,
            "encoder_step": self.encoder_step,
            "encoder_hidden": self.encoder_hidden,
            "stats": {k: [float(x) for x in v] for k, v in self.stats.items()},
            "extra": self.extra,
        }

    def save(self, path):
        save_checkpoint(path, self.store, self.hyperparams())

    @classmethod
    def load(cls, path):
        store, meta = load_checkpoint(path)
        meta = dict(meta)
        meta.pop("dtau", None)
        meta["stats"] = {k: np.asarray(v) for k, v in meta.get("stats", {}).items()}
        return cls(store=store, **meta)

    # standardization helpers
    def standardize(self, values):
        if not self.stats:
            return np.asarray(values, dtype=np.float64)
        return (np.asarray(values) - self.stats["mean"]) / self.stats["std"]

    def unstandardize(self, values):
        if not self.stats:
            return np.asarray(values, dtype=np.float64)
        return np.asarray(values) * self.stats["std"] + self.stats["mean"]


def build_specs(obs_dim, latent_dim, treat_dim=4, hidden_layers=2, learnable_std=False,
                encoder_hidden=0):
    hid = (latent_dim,) * hidden_layers
    out_dim = 2 * obs_dim if learnable_std else obs_dim
    enc_width = encoder_hidden or latent_dim
    specs = {
        # input: observed values, observation mask, gap since previous step
        "encoder": GruSpec("encoder", obs_dim + 2, enc_width),
        "drift": MlpSpec("drift", (latent_dim + treat_dim,) + hid + (latent_dim,)),
        # input: scaled time since treatment, one-hot treatment
        "treat": MlpSpec("treat", (3,) + hid + (treat_dim,)),
        "emit": MlpSpec("emit", (latent_dim,) + hid + (out_dim,)),
    }
    if enc_width != latent_dim:
        # a wider encoder is mapped down to the latent state
        specs["readout"] = MlpSpec("readout", (enc_width, latent_dim, latent_dim))
    return specs


def init_model(obs_dim, latent_dim=8, t_star=5.0, horizon=15.0, n_steps=100,
               sigma_sde=0.1, sigma_y=0.05, treat_dim=4, hidden_layers=2,
               learnable_std=False, encoder_step=0.0, encoder_hidden=0, stats=None, seed=0, extra=None):
    specs = build_specs(obs_dim, latent_dim, treat_dim, hidden_layers, learnable_std, encoder_hidden)
    store = init_params(list(specs.values()), seed)
    return CfOdeParams(store=store, obs_dim=obs_dim, latent_dim=latent_dim, treat_dim=treat_dim,
                       hidden_layers=hidden_layers, t_star=t_star, horizon=horizon,
                       n_steps=n_steps, sigma_sde=sigma_sde, sigma_y=sigma_y,
                       learnable_std=learnable_std, encoder_step=encoder_step,
                       encoder_hidden=encoder_hidden, stats=dict(stats or {}), extra=dict(extra or {}))


# -- batched internals --------------------------------------------------------------


def encoder_inputs(model, pre_times, pre_values, masks=None):
    """Pad a batch of pre-treatment histories into per-step GRU inputs.

    Returns ``(x, active)`` with ``x`` of shape ``(K, B, obs_dim + 2)`` and
    ``active`` of shape ``(K, B, 1)``.  Observations are merged with
    unobserved filler steps (zero value, zero mask) every
    ``model.encoder_step`` time units, so the recurrence also advances
    between sparse samples.  A final query step at ``t_star`` follows;
    later steps are padding.
    """
    B = len(pre_times)
    D = model.obs_dim
    seqs = []
    for b, (times, vals) in enumerate(zip(pre_times, pre_values)):
        times = np.asarray(times, dtype=np.float64)
        n = len(times)
        if n == 0:
            raise ValueError("encode needs at least one pre-treatment observation")
        if np.any(np.diff(times) <= 0):
            raise ValueError("pre-treatment observation times must be strictly increasing")
        if times[-1] >= model.t_star:
            raise ValueError("pre-treatment observation at or after t_star")
        values = model.standardize(np.asarray(vals, dtype=np.float64).reshape(n, D))
        mask = np.ones(n) if masks is None else np.asarray(masks[b], dtype=np.float64).reshape(n)
        values = values * mask[:, None]
        if model.encoder_step > 0:
            fill = model.encoder_step * np.arange(1, int(np.ceil(model.t_star / model.encoder_step)))
            fill = fill[(fill < model.t_star) & ~np.isin(fill, times)]
            order = np.argsort(np.concatenate([times, fill]), kind="stable")
            times = np.concatenate([times, fill])[order]
            values = np.concatenate([values, np.zeros((len(fill), D))])[order]
            mask = np.concatenate([mask, np.zeros(len(fill))])[order]
        seqs.append((times, values, mask))
    K = max(len(t) for t, _, _ in seqs) + 1
    x = np.zeros((K, B, D + 2))
    active = np.zeros((K, B, 1))
    for b, (times, values, mask) in enumerate(seqs):
        n = len(times)
        x[:n, b, :D] = values
        x[:n, b, D] = mask
        x[:n + 1, b, D + 1] = np.diff(np.concatenate([[0.0], times, [model.t_star]]))
        active[:n + 1, b, 0] = 1.0
    return x, active


def encode_batch(model, params, x, active):
    spec = model.encoder
    K, B, _ = x.shape
    H = spec.hidden_width
    gx_all = ad.add(ad.matmul(x.reshape(K * B, -1), params["encoder.Wx"]), params["encoder.bx"])
    h = ad.constant(np.zeros((B, H)))
    for k in range(K):
        gx = gx_all[k * B:(k + 1) * B]
        h_new = gru_step(spec, params, None, h, gx=gx)
        a = active[k]
        if np.all(a == 1.0):
            h = h_new
        else:
            h = ad.add(h, ad.mul(a, ad.sub(h_new, h)))
    if "readout" in model.specs:
        h = mlp_forward(model.specs["readout"], params, h)
    return h


def treatment_inputs(model, params):
    """Treatment-input vectors on the grid for both arms: shape ``(2 * n_steps, treat_dim)``.

    Row ``arm * n_steps + m`` holds ``u_arm`` at grid step ``m``; rows with
    ``tau_m - t_star <= 0`` are zeroed.
    """
    M = model.n_steps
    s = model.dtau * np.arange(M)
    scaled = s / (model.horizon - model.t_star)
    inp = np.zeros((2 * M, 3))
    inp[:M, 0] = scaled
    inp[:M, 1] = 1.0
    inp[M:, 0] = scaled
    inp[M:, 2] = 1.0
    gate = (np.concatenate([s, s]) > 0).astype(np.float64)[:, None]
    return ad.mul(mlp_forward(model.treat, params, inp), gate)


def rollout(model, params, h0, treatments, noise):
    """Euler-Maruyama over the grid for every row of ``h0``.

    ``treatments`` holds one 0/1 label per row; ``noise`` has shape
    ``(n_steps, rows, latent)`` of standard normals.  Returns the list of
    grid states (``n_steps + 1`` tensors) and the stacked drift values
    ``(n_steps * rows, latent)``.
    """
    M = model.n_steps
    dtau = model.dtau
    R = h0.shape[0]
    treatments = np.asarray(treatments, dtype=int)
    sel = np.zeros((R, 2))
    sel[np.arange(R), treatments] = 1.0
    u_all = treatment_inputs(model, params)
    diff = model.sigma_sde * np.sqrt(dtau)
    h = h0
    states = [h]
    drifts = []
    for m in range(M):
        u_m = ad.matmul(sel, u_all[[m, M + m]])
        f = mlp_forward(model.drift, params, ad.concat([h, u_m], axis=1))
        drifts.append(f)
        step = ad.add(h, ad.scale(f, dtau))
        if diff > 0:
            step = ad.add(step, diff * noise[m])
        if not np.all(np.isfinite(step.value)):
            raise FloatingPointError(f"non-finite latent state at SDE step {m + 1}")
        h = step
        states.append(h)
    return states, ad.concat(drifts, axis=0)


def emission(model, params, states):
    """Emission applied to stacked states; returns ``(mu, sigma)`` tensors.

    ``sigma`` is a tensor only with learnable std, else the fixed float.
    """
    out = mlp_forward(model.emit, params, states)
    if not model.learnable_std:
        return out, model.sigma_y
    D = model.obs_dim
    mu = out[:, :D]
    sigma = ad.add(ad.softplus(out[:, D:]), STD_FLOOR)
    return mu, sigma


def grid_index(model, times):
    """Nearest grid index for each time in ``times`` (must lie in [t*, horizon])."""
    times = np.asarray(times, dtype=np.float64)
    tol = 1e-9 * max(1.0, model.horizon)
    if np.any(times < model.t_star - tol) or np.any(times > model.horizon + tol):
        raise ValueError(f"evaluation times must lie in [{model.t_star}, {model.horizon}]")
    return np.clip(np.rint((times - model.t_star) / model.dtau).astype(int), 0, model.n_steps)


# -- single-unit API -------------------------------------------------------


@dataclass
class LatentPath:
    grid: np.ndarray
    states: np.ndarray
    kl_integrand: np.ndarray
    noise: np.ndarray
    treatment: int

    @property
    def dtau(self):
        return float(self.grid[1] - self.grid[0])


@dataclass
class OutcomePrediction:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray


def encode(model, pre_times, pre_values, masks=None):
    """h(t*) for one unit's pre-treatment history."""
    x, active = encoder_inputs(model, [pre_times], [pre_values],
                               None if masks is None else [masks])
    return encode_batch(model, model.store.bind(), x, active).value[0]


def noise_draws(model, seed, episode_id=0, sample_index=0):
    """Standard normal draws ``(n_steps, latent)`` keyed on (seed, unit, sample)."""
    rng = np.random.default_rng([int(seed), int(episode_id), int(sample_index)])
    return rng.standard_normal((model.n_steps, model.latent_dim))


def sample_path(model, h_tstar, treatment, noise_seed, episode_id=0, sample_index=0):
    if treatment not in (0, 1):
        raise ValueError(f"treatment must be 0 or 1, got {treatment}")
    xi = noise_draws(model, noise_seed, episode_id, sample_index)
    params = model.store.bind()
    h0 = ad.constant(np.asarray(h_tstar, dtype=np.float64).reshape(1, -1))
    states, drifts = rollout(model, params, h0, [treatment], xi[:, None, :])
    f = drifts.value
    integrand = (f * f).sum(axis=1) / model.sigma_sde ** 2 if model.sigma_sde > 0 else np.full(len(f), np.nan)
    return LatentPath(grid=model.grid, states=np.stack([s.value[0] for s in states]),
                      kl_integrand=integrand, noise=xi, treatment=treatment)


def decode(model, path, eval_times):
    """Outcome means at ``eval_times`` from the nearest grid states of ``path``."""
    idx = grid_index(model, eval_times)
    mu, _ = emission(model, model.store.bind(), ad.constant(path.states[idx]))
    return mu.value


def learnable_std_decode(model, path, eval_times):
    if not model.learnable_std:
        raise RuntimeError("model was built without learnable std; use decode()")
    idx = grid_index(model, eval_times)
    mu, sigma = emission(model, model.store.bind(), ad.constant(path.states[idx]))
    return mu.value, sigma.value


def predict_batch(model, episodes, treatment, n_mc=50, seed=0, chunk=64):
    """Decoded outcome means for every episode and MC sample (standardized units).

    Returns an array ``(n_mc, n_episodes, len(grid), obs_dim)`` on the model
    grid.  ``treatment`` is an int applied to all episodes or a per-episode
    sequence.  Noise for sample ``s`` of unit ``e`` depends only on
    ``(seed, e.episode_id, s)``, so both arms share their draws.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    episodes = list(episodes)
    treats = np.broadcast_to(np.asarray(treatment, dtype=int), (len(episodes),))
    params = model.store.bind()
    out = np.empty((n_mc, len(episodes), model.n_steps + 1, model.obs_dim))
    for start in range(0, len(episodes), chunk):
        part = episodes[start:start + chunk]
        B = len(part)
        x, active = encoder_inputs(model, [e.pre_times for e in part], [e.pre_values for e in part])
        h = encode_batch(model, params, x, active).value
        h0 = np.tile(h, (n_mc, 1))
        xi = np.empty((model.n_steps, n_mc * B, model.latent_dim))
        for s in range(n_mc):
            for b, e in enumerate(part):
                xi[:, s * B + b] = noise_draws(model, seed, e.episode_id, s)
        rows_t = np.tile(treats[start:start + B], n_mc)
        states, _ = rollout(model, params, ad.constant(h0), rows_t, xi)
        stacked = np.concatenate([st.value for st in states], axis=0)
        mu, _ = emission(model, params, ad.constant(stacked))
        mu = mu.value.reshape(model.n_steps + 1, n_mc, B, model.obs_dim)
        out[:, start:start + B] = mu.transpose(1, 2, 0, 3)
    return out


def sample_std(samples):
    """Std over the leading axis (n - 1 denominator), exactly 0 where all samples agree."""
    samples = np.asarray(samples)
    std = samples.std(axis=0, ddof=1)
    std[np.all(samples == samples[:1], axis=0)] = 0.0
    return std


def predict_outcomes(model, episode, treatment, n_mc=50, seed=0, eval_times=None):
    """Monte-Carlo mean/std of decoded means for one unit and arm (standardized)."""
    times = episode.eval_times if eval_times is None else np.asarray(eval_times)
    samples = predict_batch(model, [episode], treatment, n_mc, seed)[:, 0]
    samples = samples[:, grid_index(model, times)]
    std = sample_std(samples) if n_mc > 1 else np.zeros(samples.shape[1:])
    return OutcomePrediction(times=times, mean=samples.mean(axis=0), std=std, samples=samples)
