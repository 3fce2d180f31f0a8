from .config import RunConfig, parse_config
from .logging_utils import get_logger
from .phantom_gen import ShapeKind, ShapeSpec, Phantom, generate_phantom, sample_dataset
from .ct_core import Geometry, Sinogram, NoiseModel, project, backproject, add_noise, sirt_reconstruct
from .metrics import psnr
from .scan_env import ScanEnvironment, ScanTarget, ReconState, RewardSpec, StepRecord
from .policy_net import ActorCritic, build_network, loss_and_grads, apply_update
from .rl_train import td_error_naive, td_error_terminal, train_naive, train_terminal
from .tabular_oracle import exact_continuation_values, exact_gradients, estimator_check, run_oracle_suite
from .baselines import golden_ratio_sequence, uniform_sequence, greedy_exhaustive
from .data_ingest import fetch_dataset, preprocess, rebin_fan_to_parallel
from .eval_harness import run_policy_episode, summarize
from .storage import export_run_bundle

__all__ = [
    "RunConfig",
    "parse_config",
    "get_logger",
    "ShapeKind",
    "ShapeSpec",
    "Phantom",
    "generate_phantom",
    "sample_dataset",
    "Geometry",
    "Sinogram",
    "NoiseModel",
    "project",
    "backproject",
    "add_noise",
    "sirt_reconstruct",
    "psnr",
    "ScanEnvironment",
    "ScanTarget",
    "ReconState",
    "RewardSpec",
    "StepRecord",
    "ActorCritic",
    "build_network",
    "loss_and_grads",
    "apply_update",
    "td_error_naive",
    "td_error_terminal",
    "train_naive",
    "train_terminal",
    "exact_continuation_values",
    "exact_gradients",
    "estimator_check",
    "run_oracle_suite",
    "golden_ratio_sequence",
    "uniform_sequence",
    "greedy_exhaustive",
    "fetch_dataset",
    "preprocess",
    "rebin_fan_to_parallel",
    "run_policy_episode",
    "summarize",
    "export_run_bundle",
]
