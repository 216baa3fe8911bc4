"""Variational training of the latent SDE (Monte-Carlo ELBO with path KL)."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import (DEFAULT_LATENT, emission, encode_batch, encoder_inputs, grid_index,
                    init_model, predict_batch, rollout)
from .nets import adam_step

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; carries the path of the last good checkpoint, if any."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-2
    n_mc: int = 3
    n_steps: int = 100
    sigma_sde: float = 0.1
    sigma_y: float = 0.05
    kl_scale: float = 1.0
    patience: int = 30
    seed: int = 0
    latent_dim: int | None = None
    treat_dim: int = 4
    hidden_layers: int = 2
    val_n_mc: int = 5
    no_diffusion: bool = False
    learnable_std: bool = False
    encoder_steps: int = 25
    lr_final: float | None = 1e-4
    encoder_hidden: int = 32

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.no_diffusion:
            self.sigma_sde = 0.0
            self.kl_scale = 0.0
        if self.sigma_sde == 0.0 and self.kl_scale != 0.0:
            raise ValueError("sigma_sde = 0 leaves the path KL undefined; set kl_scale = 0")

    def to_dict(self):
        return asdict(self)

    def lr_at(self, epoch):
        """Cosine decay from ``lr`` to ``lr_final`` over ``epochs`` (constant if unset)."""
        if self.lr_final is None or self.epochs <= 1:
            return self.lr
        frac = min(epoch / (self.epochs - 1), 1.0)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class ElboTerms:
    loglik: float
    kl: float
    kl_scale: float
    n_points: float

    @property
    def elbo(self):
        return self.loglik - self.kl_scale * self.kl

    @property
    def loglik_per_point(self):
        return self.loglik / self.n_points if self.n_points else float("nan")


def gaussian_loglik(means, sigma, y, mask=None, reduce="mean"):
    """Gaussian log-density of ``y`` under per-sample predicted ``means``.

    ``means`` has shape ``(n_mc, n_points, dim)`` (a leading MC axis is added
    if missing) and ``y`` shape ``(n_points, dim)``.  ``reduce="mean"`` gives
    the average over samples and observed points; ``"sum"`` sums over points
    and averages over samples.
    """
    means = np.asarray(means, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if means.ndim == y.ndim:
        means = means[None]
    if means.shape[1:] != y.shape:
        raise ValueError(f"prediction/observation misalignment: {means.shape[1:]} vs {y.shape}")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), means.shape)
    logp = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((y - means) / sigma) ** 2
    if mask is None:
        mask = np.ones(y.shape)
    mask = np.broadcast_to(mask, y.shape)
    per_sample = (logp * mask).sum(axis=(1, 2))
    total = per_sample.mean()
    if reduce == "sum":
        return float(total)
    return float(total / mask.sum())


def path_kl(paths, dtau=None):
    """Riemann sum of the KL integrand, averaged over the given paths."""
    if not isinstance(paths, (list, tuple)):
        paths = [paths]
    vals = []
    for p in paths:
        if np.any(np.isnan(p.kl_integrand)):
            raise ValueError("path KL is undefined for sigma_sde = 0")
        step = p.dtau if dtau is None else dtau
        vals.append(step * float(np.sum(p.kl_integrand)))
    return float(np.mean(vals))


# -- batch objective ---------------------------------------------------------------


def factual_targets(model, episodes):
    """Standardized post-treatment observations on the model grid.

    Returns ``(targets, mask)`` shaped ``(n_steps + 1, B, obs_dim)`` and
    ``(n_steps + 1, B, 1)``.
    """
    M1 = model.n_steps + 1
    B = len(episodes)
    targets = np.zeros((M1, B, model.obs_dim))
    mask = np.zeros((M1, B, 1))
    for b, e in enumerate(episodes):
        times = e.post_times
        idx = grid_index(model, times)
        off = np.abs(model.grid[idx] - times)
        if np.any(off > 1e-6 * max(1.0, model.dtau)):
            raise ValueError(
                f"episode {e.episode_id}: observation times are not on the model grid "
                f"(max offset {off.max():.3g}, dtau {model.dtau:.3g})")
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"episode {e.episode_id}: several observations share a grid point")
        targets[idx, b] = model.standardize(e.post_values)
        mask[idx, b] = 1.0
    return targets, mask


def batch_objective(model, params, episodes, n_mc, noise, kl_scale, treatments=None):
    """Negative ELBO for one minibatch, as a tape scalar, plus its terms.

    The log-likelihood is summed over each unit's factual observations and
    averaged over MC samples and units; the KL is averaged the same way.
    """
    B = len(episodes)
    if treatments is None:
        treatments = [e.treatment for e in episodes]
    x, active = encoder_inputs(model, [e.pre_times for e in episodes], [e.pre_values for e in episodes])
    h = encode_batch(model, params, x, active)
    rep = np.tile(np.eye(B), (n_mc, 1))
    h0 = ad.matmul(rep, h)
    states, drifts = rollout(model, params, h0, np.tile(treatments, n_mc), noise)
    targets, mask = factual_targets(model, episodes)
    M1 = model.n_steps + 1
    y_rows = np.broadcast_to(targets[:, None], (M1, n_mc, B, model.obs_dim)).reshape(-1, model.obs_dim)
    m_rows = np.broadcast_to(mask[:, None], (M1, n_mc, B, 1)).reshape(-1, 1)
    mu, sigma = emission(model, params, ad.concat(states, axis=0))
    sq = ad.square(ad.sub(mu, y_rows))
    n_units = n_mc * B
    n_points = float(mask.sum()) * model.obs_dim
    if model.learnable_std:
        inv_var = ad.exp(ad.scale(ad.log(sigma), -2.0))
        logp = ad.add(ad.scale(ad.add(ad.mul(sq, inv_var), ad.scale(ad.log(sigma), 2.0)), -0.5),
                      -0.5 * LOG_2PI)
        loglik = ad.scale(ad.ad_sum(ad.mul(logp, m_rows)), 1.0 / n_units)
    else:
        s2 = model.sigma_y ** 2
        sse = ad.ad_sum(ad.mul(sq, m_rows))
        const = -0.5 * (LOG_2PI + math.log(s2)) * n_points / B
        loglik = ad.add(ad.scale(sse, -0.5 / s2 / n_units), const)
    if kl_scale != 0.0:
        kl = ad.scale(ad.ad_sum(ad.square(drifts)), model.dtau / model.sigma_sde ** 2 / n_units)
        loss = ad.sub(ad.scale(kl, kl_scale), loglik)
        kl_val = float(kl.value)
    else:
        loss = ad.scale(loglik, -1.0)
        kl_val = (float(np.sum(drifts.value ** 2)) * model.dtau / model.sigma_sde ** 2 / n_units
                  if model.sigma_sde > 0 else 0.0)
    terms = ElboTerms(loglik=float(loglik.value), kl=kl_val, kl_scale=kl_scale,
                      n_points=n_points / B)
    return loss, terms


def _grads_by_name(tape, params, grads):
    return {name: grads[t.node] for name, t in params.items()}


def train_noise(model, seed, epoch, batch, n_rows):
    rng = np.random.default_rng([int(seed), int(epoch), int(batch), 7])
    return rng.standard_normal((model.n_steps, n_rows, model.latent_dim))


def factual_rmse(model, episodes, n_mc, seed):
    """RMSE of MC-mean factual predictions against the (noisy) factual observations."""
    if not episodes:
        return float("nan")
    pred = predict_batch(model, episodes, [e.treatment for e in episodes], n_mc, seed).mean(axis=0)
    targets, mask = factual_targets(model, episodes)
    err = (pred.transpose(1, 0, 2) - targets) ** 2 * mask
    return float(np.sqrt(err.sum() / (mask.sum() * model.obs_dim)))


@dataclass
class TrainResult:
    model: object
    curve: list
    best_epoch: int
    stopped_early: bool


def build_model(dataset_config, stats, config):
    latent = config.latent_dim or DEFAULT_LATENT[dataset_config.dataset]
    return init_model(
        obs_dim=dataset_config.obs_dim, latent_dim=latent,
        t_star=dataset_config.t_star, horizon=dataset_config.horizon, n_steps=config.n_steps,
        sigma_sde=config.sigma_sde, sigma_y=config.sigma_y, treat_dim=config.treat_dim,
        hidden_layers=config.hidden_layers, learnable_std=config.learnable_std,
        encoder_step=dataset_config.t_star / config.encoder_steps if config.encoder_steps else 0.0,
        encoder_hidden=config.encoder_hidden,
        stats=stats, seed=config.seed,
        extra={"dataset": dataset_config.dataset, "dataset_hash": dataset_config.config_hash(),
               "train_config": config.to_dict()},
    )


def train(dataset, config, checkpoint_path=None, log_path=None, model=None, max_steps=None,
          train_split="train", val_split="val"):
    """Minibatch Adam on the negative ELBO with early stopping on validation RMSE.

    Only factual arms enter the loss.  Returns a :class:`TrainResult` holding
    the best-validation model; if ``checkpoint_path`` is given it is written
    whenever the validation RMSE improves.
    """
    train_eps = dataset.split(train_split)
    val_eps = dataset.split(val_split)
    if not train_eps:
        raise ValueError("dataset has no training episodes")
    if model is None:
        model = build_model(dataset.config, dataset.stats, config)
    best_store = model.store.copy()
    best_val = math.inf
    best_epoch = -1
    since_best = 0
    curve = []
    steps = 0
    stopped_early = False
    t0 = time.perf_counter()
    order_ids = np.array([e.episode_id for e in train_eps])
    by_id = {e.episode_id: e for e in train_eps}
    last_good = None
    for epoch in range(config.epochs):
        rng = np.random.default_rng([int(config.seed), int(epoch), 3])
        perm = order_ids[rng.permutation(len(order_ids))]
        lr = config.lr_at(epoch)
        ll_sum = kl_sum = loss_sum = 0.0
        n_batches = 0
        for bi, start in enumerate(range(0, len(perm), config.batch_size)):
            batch = [by_id[i] for i in perm[start:start + config.batch_size]]
            tape = ad.Tape()
            params = model.store.bind(tape)
            noise = train_noise(model, config.seed, epoch, bi, config.n_mc * len(batch))
            loss, terms = batch_objective(model, params, batch, config.n_mc, noise, config.kl_scale)
            if not np.isfinite(loss.value):
                msg = (f"non-finite loss at epoch {epoch}, batch {bi} "
                       f"(episodes {[e.episode_id for e in batch]}): loglik={terms.loglik}, kl={terms.kl}")
                raise TrainingDiverged(msg, last_good)
            grads = _grads_by_name(tape, params, tape.backward(loss))
            adam_step(model.store, grads, lr=lr)
            ll_sum += terms.loglik_per_point
            kl_sum += terms.kl
            loss_sum += float(loss.value)
            n_batches += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        val = factual_rmse(model, val_eps, config.val_n_mc, config.seed) if val_eps else math.nan
        rec = {
            "epoch": epoch,
            "train_loss": loss_sum / n_batches,
            "train_loglik": ll_sum / n_batches,
            "train_kl": kl_sum / n_batches,
            "val_rmse": val,
            "wall_time": time.perf_counter() - t0,
        }
        curve.append(rec)
        logger.info("epoch %d loss %.4f loglik/pt %.4f kl %.4f val %.4f", epoch,
                    rec["train_loss"], rec["train_loglik"], rec["train_kl"], val)
        if log_path is not None:
            write_curve(log_path, curve)
        improved = (val < best_val) if not math.isnan(val) else True
        if improved:
            best_val = val
            best_epoch = epoch
            best_store = model.store.copy()
            since_best = 0
            if checkpoint_path is not None:
                model.save(checkpoint_path)
                last_good = checkpoint_path
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped_early = True
                break
        if max_steps is not None and steps >= max_steps:
            break
    model.store = best_store
    return TrainResult(model=model, curve=curve, best_epoch=best_epoch, stopped_early=stopped_early)


CURVE_FIELDS = ("epoch", "train_loss", "train_loglik", "train_kl", "val_rmse", "wall_time")


def write_curve(path, curve, config_hash=None):
    lines = []
    if config_hash:
        lines.append(f"# config_hash={config_hash}")
    lines.append("\t".join(CURVE_FIELDS))
    for rec in curve:
        lines.append("\t".join(str(rec[k]) if k == "epoch" else format(rec[k], ".17g") for k in CURVE_FIELDS))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# -- gradient check ------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict
    n_params: int
    note: str = ""

    @property
    def passed(self):
        return self.max_rel_error < 1e-4


def _tiny_setup(seed, learnable_std=False, encoder_hidden=0):
    from .simulators import SimConfig, simulate_units
    cfg = SimConfig(dataset="oscillator", n_episodes=1, seed=seed, eval_step=2.0)
    ep = simulate_units(cfg, [0])[0]
    stats = {"mean": np.array([0.0]), "std": np.array([0.7])}
    model = init_model(obs_dim=1, latent_dim=3, t_star=cfg.t_star, horizon=cfg.horizon, n_steps=5,
                       sigma_sde=0.3, sigma_y=0.5, treat_dim=2, hidden_layers=2,
                       learnable_std=learnable_std, encoder_hidden=encoder_hidden, stats=stats,
                       seed=seed)
    return model, ep


def grad_check(model=None, episode=None, frozen_noise=True, n_mc=2, kl_scale=1.0, eps=1e-6, seed=0):
    """Compare backprop gradients of the ELBO against central differences.

    Defaults to a tiny oscillator instance (latent 3, 5 SDE steps, one unit).
    The noise draws are fixed once so the objective is deterministic;
    ``frozen_noise=False`` is refused because finite differences of a
    resampled objective are meaningless.
    """
    if not frozen_noise:
        raise ValueError("grad_check requires frozen noise draws; the resampled objective is stochastic")
    if model is None or episode is None:
        model, episode = _tiny_setup(seed)
    if model.store.n_params == 0:
        return GradCheckReport(0.0, {}, 0, note="no parameters; trivially passes")
    noise = np.random.default_rng([seed, 11]).standard_normal((model.n_steps, n_mc, model.latent_dim))

    def objective(store_params=None):
        loss, _ = batch_objective(model, model.store.bind(), [episode], n_mc, noise, kl_scale)
        return float(loss.value)

    tape = ad.Tape()
    params = model.store.bind(tape)
    loss, _ = batch_objective(model, params, [episode], n_mc, noise, kl_scale)
    analytic = _grads_by_name(tape, params, tape.backward(loss))

    groups = {}
    for name in model.store.names():
        arr = model.store.params[name]
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = objective()
            flat[i] = orig - eps
            down = objective()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * eps)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(fd), 1e-8)
        groups[name.split(".")[0]] = max(groups.get(name.split(".")[0], 0.0),
                                         float(np.linalg.norm(a - fd) / denom))
    return GradCheckReport(max(groups.values()), groups, model.store.n_params)
