"""Counterfactual trajectories with a latent neural SDE (numpy only)."""

from .estimator import CFODE
from .evaluation import EvalReport, TrimCurve, evaluate_model, fdr_curve, pehe, rmse_split, strategy_pr, trim_curve
from .model import CfOdeParams, init_model, predict_outcomes
from .simulators import Dataset, Episode, SimConfig, generate_dataset, load_dataset
from .training import TrainConfig, grad_check, train

__version__ = "0.1.0"

__all__ = [
    "CFODE", "CfOdeParams", "Dataset", "Episode", "EvalReport", "SimConfig", "TrainConfig", "TrimCurve",
    "evaluate_model", "fdr_curve", "generate_dataset", "grad_check", "init_model", "load_dataset",
    "pehe", "predict_outcomes", "rmse_split", "strategy_pr", "train", "trim_curve",
]
