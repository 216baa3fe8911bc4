"""Experiment orchestration behind the ``cfode`` command line.

Outputs for one run live under ``<out>/<dataset>/<gamma>/<seed>/`` in the
sub-directories ``data``, ``checkpoints``, ``eval`` and ``curves``.  Every
table is tab-separated, starts with a ``# config_hash=...`` comment line and
then a header row.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import (DEFAULT_FRACTIONS, STRATEGIES, EvalReport, evaluate_model, ood_uncertainty)
from .model import CfOdeParams
from .serialization import loads_record
from .simulators import SimConfig, config_hash, generate_dataset, load_dataset
from .training import TrainConfig, grad_check, train, write_curve

logger = logging.getLogger(__name__)

VARIANTS = {"none": "cfode", "no-diffusion": "no-diffusion", "learnable-std": "learnable-std"}
SUMMARY_METRICS = ("in_rmse", "out_rmse", "pehe", "pehe_50_uncertainty", "pehe_50_propensity",
                   "pehe_50_random")


class PipelineError(RuntimeError):
    """A command could not complete; the message names the offending input."""


@dataclass
class RunConfig:
    command: str = "report"
    # data
    dataset: str = "oscillator"
    gamma: float = 8.0
    n: int = 1000
    seed: int = 0
    seeds: list = field(default_factory=list)
    rk4_dt: float = 0.01
    obs_rate: float = 20.0
    ood_fraction: float = 0.0
    # training
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-2
    lr_final: float | None = 1e-4
    train_n_mc: int = 3
    n_steps: int = 100
    sigma_sde: float = 0.1
    sigma_y: float = 0.05
    kl_scale: float = 1.0
    patience: int = 30
    latent_dim: int | None = None
    treat_dim: int = 4
    hidden_layers: int = 2
    encoder_steps: int = 25
    encoder_hidden: int = 32
    ablation: str = "none"
    max_steps: int | None = None
    # evaluation
    n_mc: int = 50
    fractions: list = field(default_factory=lambda: [float(f) for f in DEFAULT_FRACTIONS])
    fdr_fractions: list = field(default_factory=lambda: [1.0, 0.8, 0.5])
    decision_time: float | None = None
    eval_split: str = "test"
    inputs: list = field(default_factory=list)
    out: str = "out"

    def __post_init__(self):
        if self.ablation not in VARIANTS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {sorted(VARIANTS)}")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(f.default, float) and isinstance(v, int) and not isinstance(v, bool):
                setattr(self, f.name, float(v))
        if not self.seeds:
            self.seeds = [self.seed]
        self.seeds = [int(s) for s in self.seeds]

    @property
    def variant(self):
        return VARIANTS[self.ablation]

    def for_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed), seeds=[int(seed)])

    def resolved(self):
        d = dataclasses.asdict(self)
        for k in ("command", "seeds", "inputs", "out"):
            d.pop(k)
        return d

    def hash(self):
        return config_hash(self.resolved())

    def sim_config(self):
        return SimConfig(dataset=self.dataset, gamma=self.gamma, n_episodes=self.n, rk4_dt=self.rk4_dt,
                         obs_rate=self.obs_rate, seed=self.seed, ood_fraction=self.ood_fraction)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           n_mc=self.train_n_mc, n_steps=self.n_steps,
                           sigma_sde=self.sigma_sde, sigma_y=self.sigma_y, kl_scale=self.kl_scale,
                           patience=self.patience, seed=self.seed, latent_dim=self.latent_dim,
                           treat_dim=self.treat_dim, hidden_layers=self.hidden_layers,
                           encoder_steps=self.encoder_steps, encoder_hidden=self.encoder_hidden,
                           lr_final=self.lr_final,
                           no_diffusion=self.ablation == "no-diffusion",
                           learnable_std=self.ablation == "learnable-std")


def gamma_dir(config):
    return Path(config.out) / config.dataset / f"{config.gamma:g}"


@dataclass
class RunPaths:
    root: Path
    variant: str

    @property
    def dataset(self):
        return self.root / "data" / "dataset.jsonl"

    @property
    def manifest(self):
        return self.root / "data" / "manifest.json"

    @property
    def checkpoint(self):
        return self.root / "checkpoints" / f"{self.variant}.ckpt"

    @property
    def train_curve(self):
        return self.root / "curves" / f"{self.variant}_train.tsv"

    @property
    def episodes(self):
        return self.root / "eval" / f"{self.variant}_episodes.tsv"

    @property
    def summary(self):
        return self.root / "eval" / f"{self.variant}_summary.tsv"

    @property
    def ood(self):
        return self.root / "eval" / f"{self.variant}_ood.tsv"

    def trim(self, strategy):
        return self.root / "curves" / f"{self.variant}_trim_{strategy}.tsv"

    def pr(self, strategy):
        return self.root / "curves" / f"{self.variant}_pr_{strategy}.tsv"

    @property
    def auc(self):
        return self.root / "curves" / f"{self.variant}_auc_pr.tsv"

    @property
    def fdr(self):
        return self.root / "curves" / f"{self.variant}_fdr.tsv"


def run_paths(config):
    return RunPaths(gamma_dir(config) / str(config.seed), config.variant)


# -- tables ----------------------------------------------------------------------------


def fmt(x):
    if x is None:
        return "NA"
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "NA" if math.isnan(x) else format(float(x), ".17g")
    return str(x)


def write_table(path, columns, rows, meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = " ".join(f"{k}={v}" for k, v in meta.items())
    lines = [f"# {head}", "\t".join(columns)]
    lines += ["\t".join(fmt(r[c]) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def read_table(path):
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"missing input file {path}")
    lines = path.read_text().splitlines()
    meta = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split()) if lines[0].startswith("#") else {}
    body = lines[1:] if meta else lines
    cols = body[0].split("\t")
    return meta, [dict(zip(cols, line.split("\t"))) for line in body[1:]]


def num(s):
    return math.nan if s == "NA" else float(s)


# -- commands --------------------------------------------------------------------------


def _meta(config, **extra):
    return {"config_hash": config.hash(), **extra}


def cmd_generate(config):
    paths = run_paths(config)
    paths.dataset.parent.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(config.sim_config(), paths.dataset, paths.manifest)
    logger.info("wrote %d episodes to %s", len(ds), paths.dataset)
    return ds


def ensure_dataset(config):
    """Load the run's dataset, generating it first if absent."""
    paths = run_paths(config)
    if not paths.manifest.exists():
        return cmd_generate(config)
    ds = load_dataset(paths.dataset, paths.manifest)
    expected = config.sim_config().config_hash()
    if ds.config.config_hash() != expected:
        raise PipelineError(f"{paths.manifest} was generated with a different configuration "
                            f"(hash {ds.config.config_hash()}, expected {expected}); rerun generate")
    return ds


def cmd_train(config):
    ds = ensure_dataset(config)
    paths = run_paths(config)
    paths.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    result = train(ds, config.train_config(), checkpoint_path=paths.checkpoint,
                   max_steps=config.max_steps)
    result.model.save(paths.checkpoint)
    write_curve(paths.train_curve, result.curve, config.hash())
    logger.info("best epoch %d; checkpoint %s", result.best_epoch, paths.checkpoint)
    return result


def load_model(config):
    paths = run_paths(config)
    if not paths.checkpoint.exists():
        raise PipelineError(f"checkpoint not found: expected {paths.checkpoint} (run train first)")
    return CfOdeParams.load(paths.checkpoint)


EPISODE_COLUMNS = ("episode_id", "treatment", "propensity", "factual_rmse", "counterfactual_rmse",
                   "pehe_sq", "uncertainty", "true_ite", "ite_samples")


def write_episode_table(path, report, meta):
    rows = []
    for i in range(len(report)):
        rows.append({
            "episode_id": int(report.episode_ids[i]), "treatment": int(report.treatment[i]),
            "propensity": report.propensity[i], "factual_rmse": report.factual_rmse[i],
            "counterfactual_rmse": report.counterfactual_rmse[i], "pehe_sq": report.pehe_sq[i],
            "uncertainty": report.uncertainty[i], "true_ite": report.true_ite[i],
            "ite_samples": ",".join(fmt(x) for x in report.ite_samples[i]),
        })
    write_table(path, EPISODE_COLUMNS, rows, meta)


def read_episode_table(path):
    meta, rows = read_table(path)
    col = lambda k, f=num: np.array([f(r[k]) for r in rows])  # noqa: E731
    return EvalReport(
        episode_ids=col("episode_id", int), treatment=col("treatment", int),
        propensity=col("propensity"), factual_rmse=col("factual_rmse"),
        counterfactual_rmse=col("counterfactual_rmse"), pehe_sq=col("pehe_sq"),
        uncertainty=col("uncertainty"), true_ite=col("true_ite"),
        ite_samples=np.array([[float(x) for x in r["ite_samples"].split(",")] for r in rows]),
        meta=meta,
    )


def summary_of(report, seed=0):
    agg = report.aggregates()
    for s in ("uncertainty", "propensity", "random"):
        agg[f"pehe_50_{s}"] = report.trimmed(s, 0.5, seed)["pehe"]
    return agg


def cmd_evaluate(config):
    """Per-episode records and summary for each seed; mean ± std when several seeds run."""
    model = load_model(config)
    ds = ensure_dataset(config)
    eps = ds.split(config.eval_split)
    if not eps:
        raise PipelineError(f"split {config.eval_split!r} is empty in {run_paths(config).manifest}")
    report = evaluate_model(model, eps, ds.outcome_dims, n_mc=config.n_mc, seed=config.seed,
                            t_decision=config.decision_time)
    paths = run_paths(config)
    meta = _meta(config, dataset_hash=ds.config.config_hash())
    write_episode_table(paths.episodes, report, meta)
    agg = summary_of(report, config.seed)
    write_table(paths.summary, ("metric", "value"),
                [{"metric": k, "value": agg[k]} for k in SUMMARY_METRICS], meta)
    return report


def episode_report(config):
    paths = run_paths(config)
    if not paths.episodes.exists():
        return cmd_evaluate(config)
    return read_episode_table(paths.episodes)


def cmd_trim(config):
    report = episode_report(config)
    paths = run_paths(config)
    curves = {}
    for strategy in STRATEGIES:
        curve = report.trim(strategy, config.fractions, seed=config.seed)
        rows = [{"fraction": f, "pehe": v, "normalized_pehe": nv}
                for f, v, nv in zip(curve.fractions, curve.values, curve.normalized)]
        write_table(paths.trim(strategy), ("fraction", "pehe", "normalized_pehe"), rows, _meta(config))
        curves[strategy] = curve
    return curves


def cmd_strategy(config):
    report = episode_report(config)
    paths = run_paths(config)
    curves = report.strategies()
    for name, c in curves.items():
        rows = [{"threshold": t, "precision": p, "recall": r}
                for t, p, r in zip(c.thresholds, c.precision, c.recall)]
        write_table(paths.pr(name), ("threshold", "precision", "recall"), rows, _meta(config))
    write_table(paths.auc, ("strategy", "auc_pr", "degenerate"),
                [{"strategy": n, "auc_pr": c.auc, "degenerate": c.degenerate} for n, c in curves.items()],
                _meta(config))
    return curves


def cmd_fdr(config):
    report = episode_report(config)
    fractions, values = report.fdr(config.fdr_fractions)
    write_table(run_paths(config).fdr, ("fraction", "fdr"),
                [{"fraction": f, "fdr": v} for f, v in zip(fractions, values)], _meta(config))
    return dict(zip(fractions, values))


def cmd_ood(config):
    model = load_model(config)
    ds = ensure_dataset(config)
    ood = ds.split("ood")
    if not ood:
        raise PipelineError(f"{run_paths(config).manifest} has no OOD split; generate with --ood_fraction > 0")
    ind = ds.split(config.eval_split)
    scores = {}
    for name, eps in (("in_distribution", ind), ("out_of_distribution", ood)):
        scores[name] = evaluate_model(model, eps, ds.outcome_dims, n_mc=config.n_mc,
                                      seed=config.seed).uncertainty
    id_mean, ood_mean, t = ood_uncertainty(scores["in_distribution"], scores["out_of_distribution"])
    rows = [{"group": "in_distribution", "n": len(ind), "normalized_uncertainty": id_mean},
            {"group": "out_of_distribution", "n": len(ood), "normalized_uncertainty": ood_mean}]
    write_table(run_paths(config).ood, ("group", "n", "normalized_uncertainty"), rows,
                _meta(config, t_statistic=fmt(t)))
    return id_mean, ood_mean, t


def cmd_gradcheck(config):
    rep = grad_check(seed=config.seed)
    rows = [{"group": g, "max_rel_error": e} for g, e in sorted(rep.per_group.items())]
    write_table(Path(config.out) / "gradcheck.tsv", ("group", "max_rel_error"), rows,
                _meta(config, passed=int(rep.passed)))
    if not rep.passed:
        raise PipelineError(f"gradient check failed: max relative error {rep.max_rel_error:.3g}")
    return rep


def mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate_summaries(summaries):
    """``{metric: (mean, std, n)}`` across per-seed summary dicts."""
    out = {}
    for k in SUMMARY_METRICS:
        m, s = mean_std([d[k] for d in summaries])
        out[k] = (m, s, len(summaries))
    return out


def _seed_dirs(config):
    if config.inputs:
        return [Path(p) for p in config.inputs]
    return [gamma_dir(config) / str(s) for s in config.seeds]


def _compatible(manifests):
    """Manifests must agree on everything except the seed and derived fields."""
    def key(m):
        cfg = dict(m["config"])
        cfg.pop("seed", None)
        return (m.get("constants_version"), tuple(sorted(cfg.items())))
    keys = {key(m) for m in manifests.values()}
    if len(keys) > 1:
        listing = ", ".join(f"{p} ({m['config']['dataset']}, gamma={m['config']['gamma']})"
                            for p, m in manifests.items())
        raise PipelineError(f"refusing to mix incompatible dataset manifests: {listing}")


def cmd_report(config):
    """Consolidate per-seed summaries into one (variant x metric) table."""
    dirs = _seed_dirs(config)
    manifests = {}
    for d in dirs:
        mpath = d / "data" / "manifest.json"
        if not mpath.exists():
            raise PipelineError(f"missing manifest {mpath}")
        manifests[str(d)] = loads_record(mpath.read_text())
    _compatible(manifests)
    rows = []
    for variant in sorted(set(VARIANTS.values())):
        summaries = []
        for d in dirs:
            path = d / "eval" / f"{variant}_summary.tsv"
            if path.exists():
                _, recs = read_table(path)
                summaries.append({r["metric"]: num(r["value"]) for r in recs})
        if not summaries:
            continue
        for k, (m, s, n) in aggregate_summaries(summaries).items():
            rows.append({"variant": variant, "metric": k, "mean": m, "std": s, "n_seeds": n})
    if not rows:
        raise PipelineError(f"no evaluation summaries found under {', '.join(map(str, dirs))}")
    first = next(iter(manifests.values()))
    out = Path(config.out) / f"report_{first['config']['dataset']}_{first['config']['gamma']:g}.tsv"
    write_table(out, ("variant", "metric", "mean", "std", "n_seeds"), rows,
                {"config_hash": config_hash(sorted(m["config_hash"] for m in manifests.values()))})
    return rows, out


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "trim": cmd_trim,
    "strategy": cmd_strategy, "fdr": cmd_fdr, "ood": cmd_ood, "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}
PER_SEED = {"generate", "train", "evaluate", "trim", "strategy", "fdr", "ood"}


def run(config):
    """Execute ``config.command`` for every seed; returns per-seed results."""
    fn = COMMANDS[config.command]
    if config.command not in PER_SEED:
        return fn(config)
    results = {s: fn(config.for_seed(s)) for s in config.seeds}
    if config.command == "evaluate" and len(config.seeds) > 1:
        sums = [summary_of(r, s) for s, r in results.items()]
        rows = [{"metric": k, "mean": m, "std": sd, "n_seeds": n}
                for k, (m, sd, n) in aggregate_summaries(sums).items()]
        path = gamma_dir(config) / f"{config.variant}_aggregate.tsv"
        write_table(path, ("metric", "mean", "std", "n_seeds"), rows,
                    {"config_hash": config.hash()})
    return results
