"""Ground-truth simulators with confounded binary treatment assignment.

Three systems are available: a driven pendulum (``oscillator``), a
baroreflex cardiovascular model with fluid intake (``cardio``) and an
immune-response model under dexamethasone (``dexa``).  Every unit draws its
own random stream from ``(config.seed, episode_id)``, so a unit simulated on
its own is bit-identical to the same unit inside a full dataset.

Both potential outcomes are integrated from the shared state at ``t_star``:
the untreated trajectory is integrated over ``[0, horizon]`` and the treated
arm restarts from the untreated state at ``t_star``.  Off-grid query times
use cubic Hermite interpolation between RK4 nodes.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import constants
from .serialization import dumps_record, loads_record

DATASET_KINDS = tuple(constants.DATASETS)

_STREAM_PARAMS, _STREAM_TIMES, _STREAM_TREAT, _STREAM_NOISE = range(4)
_SPLIT_TAG = 2_147_483_647


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class SimConfig:
    dataset: str = "oscillator"
    gamma: float = 8.0
    n_episodes: int = 1000
    rk4_dt: float = 0.01
    obs_rate: float = 20.0
    min_obs: int = 3
    noise_std: tuple | None = None
    eval_step: float | None = None
    seed: int = 0
    ood_fraction: float = 0.0

    def __post_init__(self):
        # JSON round trips turn 8.0 into 8; normalize so the config hash is stable
        for name in ("gamma", "rk4_dt", "obs_rate", "ood_fraction"):
            setattr(self, name, float(getattr(self, name)))
        if self.eval_step is not None:
            self.eval_step = float(self.eval_step)
        self.n_episodes, self.min_obs, self.seed = int(self.n_episodes), int(self.min_obs), int(self.seed)
        if self.dataset not in constants.DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; expected one of {DATASET_KINDS}")
        if not self.rk4_dt > 0:
            raise ValueError(f"rk4_dt must be > 0, got {self.rk4_dt}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if not 0.0 <= self.ood_fraction < 1.0:
            raise ValueError("ood_fraction must lie in [0, 1)")
        if self.noise_std is not None:
            self.noise_std = tuple(float(s) for s in self.noise_std)

    @property
    def system(self):
        return constants.DATASETS[self.dataset]

    @property
    def t_star(self):
        return self.system["t_star"]

    @property
    def horizon(self):
        return self.system["horizon"]

    @property
    def obs_dim(self):
        return len(self.system["obs_names"])

    @property
    def noise(self):
        return np.asarray(self.noise_std if self.noise_std is not None else self.system["noise_std"])

    @property
    def eval_dt(self):
        if self.eval_step is not None:
            return float(self.eval_step)
        return (self.horizon - self.t_star) / 100.0

    def eval_times(self):
        n = int(round((self.horizon - self.t_star) / self.eval_dt))
        times = self.t_star + self.eval_dt * np.arange(n + 1)
        times[-1] = self.horizon
        return times

    def to_dict(self):
        d = asdict(self)
        d["noise_std"] = list(self.noise) if self.noise_std is not None else None
        return d

    def config_hash(self):
        return config_hash(self.to_dict())


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Episode:
    episode_id: int
    dataset: str
    obs_times: np.ndarray
    obs_values: np.ndarray
    t_star: float
    treatment: int
    eval_times: np.ndarray
    outcome_0: np.ndarray
    outcome_1: np.ndarray
    propensity: float
    sim_params: dict = field(default_factory=dict)

    @property
    def pre_mask(self):
        return self.obs_times < self.t_star

    @property
    def pre_times(self):
        return self.obs_times[self.pre_mask]

    @property
    def pre_values(self):
        return self.obs_values[self.pre_mask]

    @property
    def post_times(self):
        return self.obs_times[~self.pre_mask]

    @property
    def post_values(self):
        return self.obs_values[~self.pre_mask]

    def outcome(self, treatment):
        return self.outcome_1 if treatment == 1 else self.outcome_0

    @property
    def factual(self):
        return self.outcome(self.treatment)

    @property
    def counterfactual(self):
        return self.outcome(1 - self.treatment)

    def to_record(self):
        return {
            "episode_id": int(self.episode_id),
            "dataset": self.dataset,
            "obs_times": self.obs_times,
            "obs_values": self.obs_values,
            "t_star": float(self.t_star),
            "treatment": int(self.treatment),
            "eval_times": self.eval_times,
            "outcome_0": self.outcome_0,
            "outcome_1": self.outcome_1,
            "propensity": float(self.propensity),
            "sim_params": {k: float(v) for k, v in sorted(self.sim_params.items())},
        }

    @classmethod
    def from_record(cls, rec):
        arr = lambda k: np.asarray(rec[k], dtype=np.float64)
        return cls(
            episode_id=int(rec["episode_id"]),
            dataset=rec["dataset"],
            obs_times=arr("obs_times"),
            obs_values=arr("obs_values"),
            t_star=float(rec["t_star"]),
            treatment=int(rec["treatment"]),
            eval_times=arr("eval_times"),
            outcome_0=arr("outcome_0"),
            outcome_1=arr("outcome_1"),
            propensity=float(rec["propensity"]),
            sim_params=dict(rec["sim_params"]),
        )


# -- integration ---------------------------------------------------------------


def rk4_integrate(deriv, state0, t0, t1, dt):
    """Classical RK4 on a fixed grid from ``t0`` to ``t1``.

    The last step is shortened so the grid ends exactly on ``t1``.  ``state0``
    may be a batch of states; ``deriv(t, x)`` must accept the same shape.
    Returns ``(times, states)`` with ``states[k]`` the state at ``times[k]``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got t0={t0}, t1={t1}")
    n_full = int(math.floor((t1 - t0) / dt + 1e-9))
    times = [t0 + k * dt for k in range(n_full + 1)]
    if t1 - times[-1] > 1e-12 * max(1.0, abs(t1)):
        times.append(t1)
    else:
        times[-1] = t1
    x = np.array(state0, dtype=np.float64)
    states = np.empty((len(times),) + x.shape)
    states[0] = x
    for k in range(len(times) - 1):
        t, h = times[k], times[k + 1] - times[k]
        k1 = deriv(t, x)
        k2 = deriv(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = deriv(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = deriv(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at t={times[k + 1]:.6g}")
        states[k + 1] = x
    return np.asarray(times), states


def _hermite(times, states, derivs, query):
    """Cubic Hermite interpolation of one unit's trajectory at ``query``."""
    idx = np.clip(np.searchsorted(times, query, side="right") - 1, 0, len(times) - 2)
    t0, t1 = times[idx], times[idx + 1]
    h = t1 - t0
    s = ((query - t0) / h)[:, None]
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    hh = h[:, None]
    return (h00 * states[idx] + h10 * hh * derivs[idx]
            + h01 * states[idx + 1] + h11 * hh * derivs[idx + 1])


# -- the three systems -----------------------------------------------------------


class _Oscillator:
    """Pendulum whose gravity term is modulated by a decaying sinusoidal drive."""

    c = constants.OSCILLATOR

    def draw_params(self, rng):
        return {
            "theta0": rng.uniform(*self.c["theta0_range"]),
            "length": rng.uniform(*self.c["length_range"]),
        }

    def initial_state(self, p):
        return np.stack([p["theta0"], np.zeros_like(p["theta0"])], axis=1)

    def exogenous(self, s, p):
        """Drive u(s), s = t - t_star (zero for s < 0)."""
        amp = self.c["dose_per_amplitude"] * p["theta0"]
        if s < 0:
            return np.zeros_like(amp)
        return amp * math.sin(self.c["drive_freq"] * s) * math.exp(-self.c["drive_decay"] * s)

    def deriv_fn(self, p, treated, t_star):
        g_over_l = constants.GRAVITY / p["length"]

        def deriv(t, x):
            u = self.exogenous(t - t_star, p) if treated else 0.0
            out = np.empty_like(x)
            out[:, 0] = x[:, 1]
            out[:, 1] = -(1.0 + u) * g_over_l * np.sin(x[:, 0])
            return out

        return deriv

    def observe(self, x):
        return x[..., :1]

    def propensity(self, p, x_star, gamma):
        # P(T=0 | theta0) = sigmoid(gamma * (theta0 - 1))
        return 1.0 - sigmoid(gamma * (p["theta0"] - 1.0))

    def check(self, x):
        pass


class _Cardio:
    """Four-state baroreflex model (SV, P_a, P_v, S) with fluid intake."""

    c = constants.CARDIO

    def draw_params(self, rng):
        c = self.c
        return {
            "SV0": rng.uniform(*c["SV0_range"]),
            "P_a0": rng.uniform(*c["P_a0_range"]),
            "P_v0": rng.uniform(*c["P_v0_range"]),
            "S0": rng.uniform(*c["S0_range"]),
        }

    def initial_state(self, p):
        return np.stack([p["SV0"], p["P_a0"], p["P_v0"], p["S0"]], axis=1)

    def fluid(self, s):
        """External fluid input at s = t - t_star (zero before treatment)."""
        c = self.c
        if s < 0:
            return 0.0
        return c["fluid_peak"] * math.exp(-(((s - c["fluid_center"]) / c["fluid_width"]) ** 2))

    def r_tpr(self, S):
        c = self.c
        return S * (c["R_TPR_max"] - c["R_TPR_min"]) + c["R_TPR_min"] + c["R_TPR_mod"]

    def f_hr(self, S):
        c = self.c
        return S * (c["f_HR_max"] - c["f_HR_min"]) + c["f_HR_min"]

    def deriv_fn(self, p, treated, t_star):
        c = self.c

        def deriv(t, x):
            I = self.fluid(t - t_star) if treated else 0.0
            SV, Pa, Pv, S = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
            dPa = (SV * self.f_hr(S) - (Pa - Pv) / self.r_tpr(S)) / c["C_a"]
            out = np.empty_like(x)
            out[:, 0] = I
            out[:, 1] = dPa
            out[:, 2] = (-c["C_a"] * dPa + I) / c["C_v"]
            baro = 1.0 / (1.0 + np.exp(-c["k_width"] * (Pa - c["P_a_set"])))
            out[:, 3] = (1.0 - baro - S) / c["tau_baro"]
            return out

        return deriv

    def observe(self, x):
        return np.stack([x[..., 1], self.f_hr(x[..., 3])], axis=-1)

    def propensity(self, p, x_star, gamma):
        c = self.c
        return sigmoid(gamma * ((x_star[:, 1] - c["P_a_min"]) / c["P_a_width"] - 0.5))

    def check(self, x):
        bad = np.argwhere((x[..., 1] <= 0) | (x[..., 2] <= 0))
        if bad.size:
            k, i = bad[0]
            raise FloatingPointError(
                f"cardio: non-positive pressure at node {k}, unit {i}: state={x[k, i].tolist()}")


class _Dexa:
    """Five-state immune response (z1..z5) with plasma dexamethasone injection."""

    c = constants.DEXA

    def draw_params(self, rng):
        return {
            "k_dex": rng.uniform(*self.c["k_dex_range"]),
            "z4_0": rng.uniform(*self.c["z4_0_range"]),
        }

    def initial_state(self, p):
        z = np.zeros((len(p["k_dex"]), 5))
        z[:, 3] = p["z4_0"]
        return z

    def deriv_fn(self, p, treated, t_star):
        c = self.c
        k_dex = p["k_dex"]

        def deriv(t, z):
            z1, z2, z3, z4, z5 = (z[:, i] for i in range(5))
            z1p = np.maximum(z1, 0.0) ** c["h_P"]
            out = np.empty_like(z)
            out[:, 0] = (c["k_IR"] * z4 + c["k_PF"] * z4 * z1 - c["k_O"] * z1
                         + c["E_max"] * z1p / (c["EC50"] ** c["h_P"] + z1p) - k_dex * z1 * z2)
            out[:, 1] = -c["k2"] * z2 + c["k3"] * z3
            if treated and t >= t_star:
                out[:, 2] = c["injection_rate"]
            else:
                out[:, 2] = -c["k3"] * z3
            out[:, 3] = (c["k_DP"] * z4 - c["k_IIR"] * z4 * z1
                         - c["k_DC"] * z4 * np.maximum(z5, 0.0) ** c["h_C"])
            out[:, 4] = c["k1"] * z1
            return out

        return deriv

    def observe(self, z):
        return z[..., [0, 4]]

    def propensity(self, p, x_star, gamma):
        # confounding strength is fixed for this system; gamma is ignored
        return sigmoid((p["k_dex"] - 1.0) / 15.0 - 0.5)

    def check(self, z):
        if np.any(np.abs(z) > 1e6):
            raise FloatingPointError("dexa: state blow-up (|z| > 1e6)")


SYSTEMS = {"oscillator": _Oscillator(), "cardio": _Cardio(), "dexa": _Dexa()}


# -- per-unit random streams ------------------------------------------------------


def unit_streams(config, episode_id):
    """Independent generators (params, times, treatment, noise) for one unit."""
    ss = np.random.SeedSequence([int(config.seed), int(episode_id)])
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def sample_observation_times(config, t_star, horizon, rng):
    """Irregular pre-treatment times on (0, t_star) plus the dense post-treatment grid.

    The pre-treatment count is Poisson(``config.obs_rate``); draws with fewer
    than ``config.min_obs`` distinct times are resampled.
    """
    if not horizon > t_star > 0:
        raise ValueError(f"need horizon > t_star > 0, got t_star={t_star}, horizon={horizon}")
    while True:
        k = rng.poisson(config.obs_rate)
        if k < config.min_obs:
            continue
        pre = np.unique(rng.uniform(0.0, t_star, size=k))
        pre = pre[(pre > 0.0) & (pre < t_star)]
        if len(pre) >= config.min_obs:
            break
    return pre, config.eval_times()


def _unit_draws(config, ids):
    system = SYSTEMS[config.dataset]
    per_unit = []
    for eid in ids:
        r_par, r_time, r_treat, r_noise = unit_streams(config, eid)
        params = system.draw_params(r_par)
        pre, post = sample_observation_times(config, config.t_star, config.horizon, r_time)
        per_unit.append((params, pre, post, r_treat, r_noise))
    return per_unit


def simulate_units(config, ids):
    """Simulate the units ``ids`` under ``config`` (vectorised over units)."""
    ids = [int(i) for i in ids]
    system = SYSTEMS[config.dataset]
    draws = _unit_draws(config, ids)
    keys = draws[0][0].keys()
    p = {k: np.array([d[0][k] for d in draws], dtype=np.float64) for k in keys}
    t_star, horizon, dt = config.t_star, config.horizon, config.rk4_dt

    x0 = system.initial_state(p)
    f0 = system.deriv_fn(p, False, t_star)
    t_pre, x_pre = rk4_integrate(f0, x0, 0.0, t_star, dt)
    d_pre = np.stack([f0(t, x) for t, x in zip(t_pre, x_pre)])
    system.check(x_pre)
    x_star = x_pre[-1]

    post = {}
    for arm in (0, 1):
        f = system.deriv_fn(p, bool(arm), t_star)
        t_post, x_post = rk4_integrate(f, x_star, t_star, horizon, dt)
        system.check(x_post)
        d_post = np.stack([f(t, x) for t, x in zip(t_post, x_post)])
        post[arm] = (t_post, x_post, d_post)

    prop = system.propensity(p, x_star, config.gamma)
    noise_std = config.noise
    episodes = []
    for i, (eid, (params, pre_t, post_t, r_treat, r_noise)) in enumerate(zip(ids, draws)):
        treat = int(r_treat.uniform() < prop[i])
        pre_state = _hermite(t_pre, x_pre[:, i], d_pre[:, i], pre_t)
        outcomes = {}
        for arm in (0, 1):
            tp, xp, dp = post[arm]
            outcomes[arm] = system.observe(_hermite(tp, xp[:, i], dp[:, i], post_t))
        clean = np.concatenate([system.observe(pre_state), outcomes[treat]], axis=0)
        noise = r_noise.standard_normal(clean.shape) * noise_std
        episodes.append(Episode(
            episode_id=eid,
            dataset=config.dataset,
            obs_times=np.concatenate([pre_t, post_t]),
            obs_values=clean + noise,
            t_star=t_star,
            treatment=treat,
            eval_times=post_t.copy(),
            outcome_0=outcomes[0],
            outcome_1=outcomes[1],
            propensity=float(prop[i]),
            sim_params={k: float(v) for k, v in params.items()},
        ))
    return episodes


def injected_noise(config, episode):
    """Regenerate the observation noise that was added to ``episode``."""
    r_noise = unit_streams(config, episode.episode_id)[_STREAM_NOISE]
    return r_noise.standard_normal(episode.obs_values.shape) * config.noise


def _single(kind, config, unit_seed):
    if config.dataset != kind:
        raise ValueError(f"config is for {config.dataset!r}, not {kind!r}")
    return simulate_units(config, [unit_seed])[0]


def simulate_oscillator(config, unit_seed):
    return _single("oscillator", config, unit_seed)


def simulate_cardio(config, unit_seed):
    return _single("cardio", config, unit_seed)


def simulate_dexa(config, unit_seed):
    return _single("dexa", config, unit_seed)


# -- datasets ---------------------------------------------------------------------


@dataclass
class Dataset:
    config: SimConfig
    episodes: list
    splits: dict
    stats: dict

    def __post_init__(self):
        self._by_id = {e.episode_id: e for e in self.episodes}

    def split(self, name):
        return [self._by_id[i] for i in self.splits.get(name, [])]

    def __len__(self):
        return len(self.episodes)

    @property
    def outcome_dims(self):
        return tuple(self.config.system["outcome_dims"])

    def manifest(self):
        cfg = self.config.to_dict()
        return {
            "format": "cfode-manifest",
            "version": 1,
            "constants_version": constants.CONSTANTS_VERSION,
            "config": cfg,
            "config_hash": self.config.config_hash(),
            "no_confounding": bool(self.config.gamma == 0 and self.config.dataset != "dexa"),
            "n_episodes": len(self.episodes),
            "splits": {k: list(map(int, v)) for k, v in self.splits.items()},
            "standardization": {k: [float(x) for x in v] for k, v in self.stats.items()},
            "obs_names": list(self.config.system["obs_names"]),
            "outcome_dims": list(self.outcome_dims),
            "t_star": self.config.t_star,
            "horizon": self.config.horizon,
        }


def split_ids(config, ids, propensities):
    """60/20/20 train/val/test split; optionally carve out a propensity-extreme OOD set."""
    ids = np.asarray(ids)
    ood = np.array([], dtype=int)
    if config.ood_fraction > 0:
        n_ood = int(round(config.ood_fraction * len(ids)))
        # highest P(T=1) first, ties by id
        order = np.lexsort((ids, -np.asarray(propensities)))
        ood = np.sort(ids[order[:n_ood]])
        ids = np.setdiff1d(ids, ood)
    rng = np.random.default_rng([int(config.seed), _SPLIT_TAG])
    perm = ids[rng.permutation(len(ids))]
    n_train = int(round(0.6 * len(perm)))
    n_val = int(round(0.2 * len(perm)))
    splits = {
        "train": np.sort(perm[:n_train]).tolist(),
        "val": np.sort(perm[n_train:n_train + n_val]).tolist(),
        "test": np.sort(perm[n_train + n_val:]).tolist(),
    }
    if len(ood):
        splits["ood"] = ood.tolist()
    return splits


def standardization(episodes):
    vals = np.concatenate([e.obs_values for e in episodes], axis=0)
    std = vals.std(axis=0)
    std[std == 0] = 1.0
    return {"mean": vals.mean(axis=0), "std": std}


def generate_dataset(config, path=None, manifest_path=None, chunk=256):
    """Simulate ``config.n_episodes`` units and assign splits.

    When ``path``/``manifest_path`` are given the dataset is also written.
    """
    ids = list(range(config.n_episodes))
    episodes = []
    for start in range(0, len(ids), chunk):
        episodes.extend(simulate_units(config, ids[start:start + chunk]))
    splits = split_ids(config, ids, [e.propensity for e in episodes])
    by_id = {e.episode_id: e for e in episodes}
    stats = standardization([by_id[i] for i in splits["train"]])
    ds = Dataset(config, episodes, splits, stats)
    if path is not None:
        write_dataset(ds, path, manifest_path)
    return ds


def write_dataset(ds, path, manifest_path=None):
    header = {"format": "cfode-dataset", "version": 1, "config_hash": ds.config.config_hash()}
    try:
        with open(path, "w") as fh:
            fh.write(dumps_record(header) + "\n")
            for e in ds.episodes:
                fh.write(dumps_record(e.to_record()) + "\n")
        if manifest_path is not None:
            with open(manifest_path, "w") as fh:
                fh.write(dumps_record(ds.manifest()) + "\n")
    except OSError as err:
        raise OSError(f"failed writing dataset to {err.filename or path}: {err.strerror}") from err


def load_dataset(path, manifest_path):
    try:
        with open(manifest_path) as fh:
            manifest = loads_record(fh.read())
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise OSError(f"failed reading dataset from {err.filename}: {err.strerror}") from err
    header = loads_record(lines[0])
    if header.get("format") != "cfode-dataset":
        raise ValueError(f"{path}: not a cfode dataset file")
    if header["config_hash"] != manifest["config_hash"]:
        raise ValueError(f"{path} does not match manifest {manifest_path} (config hash differs)")
    cfg = dict(manifest["config"])
    config = SimConfig(**cfg)
    episodes = [Episode.from_record(loads_record(line)) for line in lines[1:] if line.strip()]
    stats = {k: np.asarray(v) for k, v in manifest["standardization"].items()}
    splits = {k: list(v) for k, v in manifest["splits"].items()}
    return Dataset(config, episodes, splits, stats)
