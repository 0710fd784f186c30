"""Offline generative auto-bidding pipeline.

Synthetic constrained auction environment, per-step diffusion state planner,
foresight-conditioned sequence policy, expectile critic, group-relative
offline policy evolution, and a rotation-based evaluation harness.
"""

from .auction import AuctionEnv, CampaignSpec, compute_bid, generate_offline_dataset, run_auction
from .checkpoint import Checkpoint
from .config import RunConfig, desk_config, load_config
from .critic import CriticPair, expectile_loss
from .data import Dataset, NormStats, Trajectory, Transition, compute_rtg, fit_normalizer
from .errors import GenbidError
from .evaluation import (PolicyBidder, RotationConfig, emit_report, infer_step,
                         rotation_eval, run_ablations, score_episode)
from .evolve import clip_objective, compute_advantages, evolve, importance_ratio, kl_penalty
from .numerics import ParamSet, SeededStream, grad_check
from .pipeline import build_ablation_artifacts, run_pipeline, train_supervised
from .planner import DiffusionPlanner, TrajectoryDiffusionPlanner
from .policy import PolicyContext, SequencePolicy, build_context
from .schedule import DiffusionSchedule, build_schedule, forward_noise, guided_noise, posterior_step

__version__ = "0.1.0"

__all__ = [
    "AuctionEnv", "CampaignSpec", "compute_bid", "generate_offline_dataset", "run_auction",
    "Checkpoint", "RunConfig", "desk_config", "load_config",
    "CriticPair", "expectile_loss",
    "Dataset", "NormStats", "Trajectory", "Transition", "compute_rtg", "fit_normalizer",
    "GenbidError",
    "PolicyBidder", "RotationConfig", "emit_report", "infer_step", "rotation_eval",
    "run_ablations", "score_episode",
    "clip_objective", "compute_advantages", "evolve", "importance_ratio", "kl_penalty",
    "ParamSet", "SeededStream", "grad_check",
    "build_ablation_artifacts", "run_pipeline", "train_supervised",
    "DiffusionPlanner", "TrajectoryDiffusionPlanner",
    "PolicyContext", "SequencePolicy", "build_context",
    "DiffusionSchedule", "build_schedule", "forward_noise", "guided_noise", "posterior_step",
]
