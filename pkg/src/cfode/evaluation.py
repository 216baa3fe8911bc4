"""Potential-outcome metrics and uncertainty-driven evaluation protocols.

All errors are reported in standardized units on the outcome dimensions of
the dataset.  Sample standard deviations use the ``n - 1`` denominator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .model import grid_index, predict_batch, sample_std

STRATEGIES = ("uncertainty", "propensity", "random")
DEFAULT_FRACTIONS = tuple(np.round(np.arange(1.0, 0.05, -0.1), 10))


def _check_same(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"grid mismatch between trajectories: {sorted(shapes)}")


def rmse(pred, true):
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    _check_same(pred, true)
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def rmse_split(pred_factual, pred_counterfactual, true_factual, true_counterfactual):
    """(in-distribution, out-of-distribution) RMSE over all units and grid times."""
    if true_factual is None or true_counterfactual is None:
        raise ValueError("both potential-outcome ground truths are required")
    return rmse(pred_factual, true_factual), rmse(pred_counterfactual, true_counterfactual)


def pehe(pred_0, pred_1, true_0, true_1):
    """Root mean square over units and times of the treatment-effect error."""
    arrays = [np.asarray(a, dtype=np.float64) for a in (pred_0, pred_1, true_0, true_1)]
    _check_same(*arrays)
    p0, p1, t0, t1 = arrays
    return float(np.sqrt(np.mean(((t1 - t0) - (p1 - p0)) ** 2)))


def uncertainty_score(samples_0, samples_1):
    """Across-sample std of predicted means, averaged over times, dims and both arms.

    ``samples_*`` have a leading Monte-Carlo axis.
    """
    s0, s1 = np.asarray(samples_0), np.asarray(samples_1)
    if s0.shape[0] < 2 or s1.shape[0] < 2:
        raise ValueError("uncertainty needs at least two Monte-Carlo samples")
    return float(0.5 * (sample_std(s0).mean() + sample_std(s1).mean()))


# -- trimming ------------------------------------------------------------------------


@dataclass
class TrimCurve:
    strategy: str
    fractions: np.ndarray
    values: np.ndarray

    @property
    def normalized(self):
        return self.values / self.values[0] if self.values[0] != 0 else np.full_like(self.values, np.nan)


def n_kept(fraction, n):
    return max(1, int(math.floor(fraction * n + 0.5 + 1e-9)))


def ranking(strategy, ids, uncertainty=None, propensity=None, seed=0):
    """Unit order, best-to-keep first; ties are broken by unit id."""
    ids = np.asarray(ids)
    if strategy == "uncertainty":
        key = np.asarray(uncertainty, dtype=np.float64)
    elif strategy == "propensity":
        key = np.abs(np.asarray(propensity, dtype=np.float64) - 0.5)
    elif strategy == "random":
        key = np.random.default_rng([int(seed), 5]).permutation(len(ids)).astype(np.float64)
    else:
        raise ValueError(f"unknown trimming strategy {strategy!r}; expected one of {STRATEGIES}")
    return np.lexsort((ids, key))


def mean_sqrt(values):
    return float(np.sqrt(np.mean(values)))


def trim_curve(values, ids, strategy, fractions=DEFAULT_FRACTIONS, uncertainty=None,
               propensity=None, seed=0, aggregate=mean_sqrt):
    """Aggregate a per-unit metric over the best-ranked fraction of units.

    With the default ``aggregate`` and per-unit mean squared errors as
    ``values`` this yields the RMSE/PEHE of each retained subset.
    """
    values = np.asarray(values, dtype=np.float64)
    fractions = np.asarray(fractions, dtype=np.float64)
    order = ranking(strategy, ids, uncertainty, propensity, seed)
    out = []
    for f in fractions:
        k = n_kept(f, len(values))
        if k == 0 or len(values) == 0:
            raise ValueError("empty retained subset")
        out.append(aggregate(values[order[:k]]))
    return TrimCurve(strategy, fractions, np.asarray(out))


# -- treatment strategies ------------------------------------------------------------


@dataclass
class PRCurve:
    strategy: str
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float
    degenerate: bool = False


def pr_curve(scores, labels, strategy=""):
    """Precision/recall for "treat if score >= threshold" over every distinct score.

    Thresholds run in increasing order, so recall is non-increasing along
    the arrays.  AUC-PR is the trapezoid over recall with the first
    (highest-threshold) precision extended to recall 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    degenerate = n_pos == 0 or n_pos == len(labels)
    thresholds = np.unique(scores)
    precision = np.empty(len(thresholds))
    recall = np.empty(len(thresholds))
    for i, thr in enumerate(thresholds):
        pred = scores >= thr
        tp = int(np.sum(pred & labels))
        precision[i] = tp / int(pred.sum())
        recall[i] = tp / n_pos if n_pos else 0.0
    r = np.concatenate([[0.0], recall[::-1]])
    p = np.concatenate([[precision[-1]], precision[::-1]])
    auc = float(np.sum(np.diff(r) * 0.5 * (p[1:] + p[:-1])))
    return PRCurve(strategy, thresholds, precision, recall, auc, degenerate)


def strategy_pr(ite_samples, true_ite):
    """PR curves for the probability and threshold treatment strategies.

    ``ite_samples`` is ``(n_units, n_mc)`` of sampled effects at the decision
    time.  The probability strategy scores by the fraction of positive
    samples; the threshold strategy by the mean predicted effect.
    """
    ite_samples = np.asarray(ite_samples, dtype=np.float64)
    labels = np.asarray(true_ite) > 0
    prob = (ite_samples > 0).mean(axis=1)
    mean = ite_samples.mean(axis=1)
    return {
        "probability": pr_curve(prob, labels, "probability"),
        "threshold": pr_curve(mean, labels, "threshold"),
    }


def false_discovery_rate(pred_ite_mean, true_ite):
    rec = np.asarray(pred_ite_mean) > 0
    if not rec.any():
        return None
    return float(np.sum(rec & (np.asarray(true_ite) < 0)) / rec.sum())


def fdr_curve(pred_ite_mean, true_ite, uncertainty, ids, fractions=(1.0, 0.8, 0.5)):
    """FDR of "treat if mean predicted effect > 0" as high-uncertainty units are dropped.

    ``None`` marks fractions where no unit is recommended for treatment.
    """
    pred_ite_mean = np.asarray(pred_ite_mean, dtype=np.float64)
    true_ite = np.asarray(true_ite, dtype=np.float64)
    order = ranking("uncertainty", ids, uncertainty=uncertainty)
    out = []
    for f in fractions:
        keep = order[:n_kept(f, len(order))]
        out.append(false_discovery_rate(pred_ite_mean[keep], true_ite[keep]))
    return list(fractions), out


def ood_uncertainty(scores_id, scores_ood):
    """Pooled-mean-normalized uncertainty of each group and a Welch t statistic."""
    a = np.asarray(scores_id, dtype=np.float64)
    b = np.asarray(scores_ood, dtype=np.float64)
    if len(a) < 10 or len(b) < 10:
        raise ValueError(f"need at least 10 units per group, got {len(a)} and {len(b)}")
    pooled = np.concatenate([a, b]).mean()
    if np.all(a == a[0]) and np.all(b == b[0]) and a[0] == b[0]:
        t = 0.0
    else:
        t = float(sps.ttest_ind(b, a, equal_var=False).statistic)
    return float(a.mean() / pooled), float(b.mean() / pooled), t


# -- model evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    episode_ids: np.ndarray
    treatment: np.ndarray
    propensity: np.ndarray
    factual_rmse: np.ndarray
    counterfactual_rmse: np.ndarray
    pehe_sq: np.ndarray
    uncertainty: np.ndarray
    true_ite: np.ndarray
    ite_samples: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def pred_ite_mean(self):
        return self.ite_samples.mean(axis=1)

    def aggregates(self, keep=None):
        sel = slice(None) if keep is None else keep
        return {
            "in_rmse": mean_sqrt(self.factual_rmse[sel] ** 2),
            "out_rmse": mean_sqrt(self.counterfactual_rmse[sel] ** 2),
            "pehe": mean_sqrt(self.pehe_sq[sel]),
        }

    def trimmed(self, strategy, fraction=0.5, seed=0):
        order = ranking(strategy, self.episode_ids, self.uncertainty, self.propensity, seed)
        return self.aggregates(order[:n_kept(fraction, len(order))])

    def trim(self, strategy, fractions=DEFAULT_FRACTIONS, seed=0):
        return trim_curve(self.pehe_sq, self.episode_ids, strategy, fractions,
                          uncertainty=self.uncertainty, propensity=self.propensity, seed=seed)

    def fdr(self, fractions=(1.0, 0.8, 0.5)):
        return fdr_curve(self.pred_ite_mean, self.true_ite, self.uncertainty, self.episode_ids, fractions)

    def strategies(self):
        return strategy_pr(self.ite_samples, self.true_ite)

    def __len__(self):
        return len(self.episode_ids)


def decision_time(t_star, horizon):
    """Time at which the individual effect is assessed: midway through the horizon."""
    return t_star + 0.5 * (horizon - t_star)


def evaluate_model(model, episodes, outcome_dims=(0,), n_mc=50, seed=0, t_decision=None):
    """Per-unit metrics for ``episodes`` under both arms (standardized units)."""
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes to evaluate")
    dims = list(outcome_dims)
    samples = {arm: predict_batch(model, episodes, arm, n_mc, seed) for arm in (0, 1)}
    if t_decision is None:
        t_decision = decision_time(model.t_star, model.horizon)
    k_dec = int(grid_index(model, [t_decision])[0])
    mean_std = model.stats["mean"][dims] if model.stats else 0.0
    std_std = model.stats["std"][dims] if model.stats else 1.0

    rows = {k: [] for k in ("fact", "cf", "pehe", "unc", "ite", "ite_s")}
    for i, e in enumerate(episodes):
        idx = grid_index(model, e.eval_times)
        s0 = samples[0][:, i][:, idx][..., dims]
        s1 = samples[1][:, i][:, idx][..., dims]
        y0 = (e.outcome_0[:, dims] - mean_std) / std_std
        y1 = (e.outcome_1[:, dims] - mean_std) / std_std
        m0, m1 = s0.mean(axis=0), s1.mean(axis=0)
        fact, cf = (m1, m0) if e.treatment == 1 else (m0, m1)
        yf, ycf = (y1, y0) if e.treatment == 1 else (y0, y1)
        rows["fact"].append(rmse(fact, yf))
        rows["cf"].append(rmse(cf, ycf))
        rows["pehe"].append(float(np.mean(((y1 - y0) - (m1 - m0)) ** 2)))
        rows["unc"].append(uncertainty_score(s0, s1) if n_mc > 1 else 0.0)
        j = int(np.argmin(np.abs(e.eval_times - t_decision)))
        rows["ite"].append(float(y1[j, 0] - y0[j, 0]))
        rows["ite_s"].append(samples[1][:, i, k_dec, dims[0]] - samples[0][:, i, k_dec, dims[0]])
    return EvalReport(
        episode_ids=np.array([e.episode_id for e in episodes]),
        treatment=np.array([e.treatment for e in episodes]),
        propensity=np.array([e.propensity for e in episodes]),
        factual_rmse=np.array(rows["fact"]),
        counterfactual_rmse=np.array(rows["cf"]),
        pehe_sq=np.array(rows["pehe"]),
        uncertainty=np.array(rows["unc"]),
        true_ite=np.array(rows["ite"]),
        ite_samples=np.array(rows["ite_s"]),
        meta={"n_mc": n_mc, "seed": seed, "t_decision": t_decision, "outcome_dims": dims},
    )
