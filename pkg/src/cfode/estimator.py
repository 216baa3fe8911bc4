"""scikit-learn style wrapper around the CF-ODE model and trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import evaluate_model
from .model import CfOdeParams, grid_index, predict_batch
from .simulators import Dataset, Episode
from .training import TrainConfig, train


def check_episodes(episodes, obs_dim=None):
    """Validate a sequence of episodes and return it as a list."""
    if isinstance(episodes, Episode):
        episodes = [episodes]
    episodes = list(episodes)
    if not episodes:
        raise ValueError("expected at least one episode")
    for e in episodes:
        if not isinstance(e, Episode):
            raise TypeError(f"expected Episode, got {type(e).__name__}")
        if obs_dim is not None and e.obs_values.shape[1] != obs_dim:
            raise ValueError(f"episode {e.episode_id} has {e.obs_values.shape[1]} observed dims, "
                             f"model expects {obs_dim}")
        if not np.all(np.isfinite(e.obs_values)):
            raise ValueError(f"episode {e.episode_id} contains non-finite observations")
    return episodes


def check_treatment(treatment, n):
    t = np.broadcast_to(np.asarray(treatment), (n,))
    if not np.all(np.isin(t, (0, 1))):
        raise ValueError(f"treatment must be 0 or 1, got {np.unique(t)}")
    return t.astype(int)


class CFODE(BaseEstimator):
    """Counterfactual latent neural SDE.

    ``fit`` takes a :class:`~cfode.simulators.Dataset` (train/val splits are
    used) and ``predict`` returns Monte-Carlo mean trajectories in the
    original observation units.

    Examples
    --------
    >>> est = CFODE(epochs=5).fit(dataset)          # doctest: +SKIP
    >>> y1 = est.predict(dataset.split("test"), 1)  # doctest: +SKIP
    """

    def __init__(self, epochs=300, batch_size=32, lr=1e-2, lr_final=1e-4, n_mc=3, n_steps=100,
                 sigma_sde=0.1, sigma_y=0.05, kl_scale=1.0, patience=30, seed=0, latent_dim=None, treat_dim=4,
                 hidden_layers=2, encoder_steps=25, encoder_hidden=32, no_diffusion=False, learnable_std=False,
                 predict_n_mc=50):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final = lr_final
        self.n_mc = n_mc
        self.n_steps = n_steps
        self.sigma_sde = sigma_sde
        self.sigma_y = sigma_y
        self.kl_scale = kl_scale
        self.patience = patience
        self.seed = seed
        self.latent_dim = latent_dim
        self.treat_dim = treat_dim
        self.hidden_layers = hidden_layers
        self.encoder_steps = encoder_steps
        self.encoder_hidden = encoder_hidden
        self.no_diffusion = no_diffusion
        self.learnable_std = learnable_std
        self.predict_n_mc = predict_n_mc

    def train_config(self):
        params = self.get_params()
        params.pop("predict_n_mc")
        return TrainConfig(**params)

    def fit(self, dataset, y=None, checkpoint_path=None, log_path=None):
        if not isinstance(dataset, Dataset):
            raise TypeError("fit expects a cfode Dataset with train/val splits")
        check_episodes(dataset.split("train"), dataset.config.obs_dim)
        result = train(dataset, self.train_config(), checkpoint_path=checkpoint_path,
                       log_path=log_path)
        self.model_ = result.model
        self.curve_ = result.curve
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = dataset.config.obs_dim
        return self

    def sample(self, episodes, treatment, n_mc=None, seed=None):
        """Per-sample means ``(n_mc, n_episodes, n_eval, obs_dim)`` in original units."""
        check_is_fitted(self, "model_")
        episodes = check_episodes(episodes, self.n_features_in_)
        treats = check_treatment(treatment, len(episodes))
        n_mc = self.predict_n_mc if n_mc is None else n_mc
        seed = self.seed if seed is None else seed
        raw = predict_batch(self.model_, episodes, treats, n_mc, seed)
        idx = grid_index(self.model_, episodes[0].eval_times)
        return self.model_.unstandardize(raw[:, :, idx])

    def predict(self, episodes, treatment=None, n_mc=None, seed=None):
        """Mean predicted trajectory; ``treatment=None`` means the factual arm."""
        episodes = check_episodes(episodes)
        if treatment is None:
            treatment = [e.treatment for e in episodes]
        return self.sample(episodes, treatment, n_mc, seed).mean(axis=0)

    def predict_effect(self, episodes, n_mc=None, seed=None):
        return self.predict(episodes, 1, n_mc, seed) - self.predict(episodes, 0, n_mc, seed)

    def score(self, episodes, y=None):
        """Negative standardized factual RMSE (higher is better)."""
        check_is_fitted(self, "model_")
        report = self.evaluate(episodes)
        return -report.aggregates()["in_rmse"]

    def evaluate(self, episodes, outcome_dims=None, n_mc=None, seed=None):
        check_is_fitted(self, "model_")
        episodes = check_episodes(episodes, self.n_features_in_)
        dims = outcome_dims if outcome_dims is not None else (0,)
        return evaluate_model(self.model_, episodes, dims,
                              n_mc=self.predict_n_mc if n_mc is None else n_mc,
                              seed=self.seed if seed is None else seed)

    def save(self, path):
        check_is_fitted(self, "model_")
        self.model_.save(path)

    @classmethod
    def load(cls, path):
        model = CfOdeParams.load(path)
        cfg = dict(model.extra.get("train_config", {}))
        known = cls().get_params()
        est = cls(**{k: v for k, v in cfg.items() if k in known})
        est.model_ = model
        est.n_features_in_ = model.obs_dim
        return est
