"""Desk-scale laboratory for backdoor data poisoning, loss-sharpness probes,
and natural-gradient purification of classifier heads."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    PoisonPlan,
    TriggerSpec,
    apply_trigger,
    gen_synth,
    make_poison_testset,
    poison_dataset,
    split_validation,
)
from .harness import ExperimentConfig, evaluate, run_defense, run_suite, train_backdoor
from .hessian import lambda_max, smoothness_report, spectral_density, trace_estimate
from .model import Network, forward, init_network, load_checkpoint, predict, save_checkpoint
from .numerics import RngState
from .optim import LrSchedule, OptimizerState, make_optimizer
from .purification import FisherMatrix, PurifyConfig, empirical_fisher, finetune_baseline, purify

__all__ = [
    "Dataset", "PoisonPlan", "TriggerSpec", "apply_trigger", "gen_synth",
    "make_poison_testset", "poison_dataset", "split_validation",
    "ExperimentConfig", "evaluate", "run_defense", "run_suite", "train_backdoor",
    "lambda_max", "smoothness_report", "spectral_density", "trace_estimate",
    "Network", "forward", "init_network", "load_checkpoint", "predict", "save_checkpoint",
    "RngState", "LrSchedule", "OptimizerState", "make_optimizer",
    "FisherMatrix", "PurifyConfig", "empirical_fisher", "finetune_baseline", "purify",
]
