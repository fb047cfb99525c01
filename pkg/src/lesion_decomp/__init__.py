"""Weakly supervised lesion localization by adversarial image decomposition."""

from .config import RunConfig, load_config
from .evaluation import EvalReport, evaluate_model, pr_curve
from .losses import LossConfig
from .model import ArchConfig, build_model, forward_critic, forward_decompose
from .phantom import PhantomSpec, generate_phantom_corpus
from .pipeline import load_corpus_sets, run_ablation
from .trainer import TrainConfig, load_checkpoint, train

__all__ = [
    "ArchConfig",
    "EvalReport",
    "LossConfig",
    "PhantomSpec",
    "RunConfig",
    "TrainConfig",
    "build_model",
    "evaluate_model",
    "forward_critic",
    "forward_decompose",
    "generate_phantom_corpus",
    "load_checkpoint",
    "load_config",
    "load_corpus_sets",
    "pr_curve",
    "run_ablation",
    "train",
]
