"""Coupled spatial-temporal attention for skeleton-based action recognition."""

__version__ = "0.1.0"

from .attention import AttentionMode, AttentionOutput, AttentionParams, apply_attention, couple, csta_forward
from .data import AugmentConfig, Dataset, FixedSample, SkeletonSequence, augment, motion_stream
from .estimator import CSTAClassifier, FrameSelector
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor
from .train import EvalReport, TrainConfig, ablation_suite, evaluate, train

__all__ = [
    "AttentionMode",
    "AttentionOutput",
    "AttentionParams",
    "AugmentConfig",
    "CSTAClassifier",
    "Dataset",
    "EvalReport",
    "FixedSample",
    "FrameSelector",
    "ModelConfig",
    "ModelParams",
    "SkeletonSequence",
    "Tape",
    "Tensor",
    "TrainConfig",
    "ablation_suite",
    "apply_attention",
    "augment",
    "couple",
    "csta_forward",
    "evaluate",
    "forward",
    "init_params",
    "load_checkpoint",
    "motion_stream",
    "save_checkpoint",
    "train",
]
