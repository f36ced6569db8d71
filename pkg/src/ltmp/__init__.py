"""Learned-threshold token merging and pruning for vision transformers."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .flops import FlopsReport, LossConfig, phi_block, r_flops, reg_loss, total_loss
from .model import LTMPViT, ModelConfig, TokenState, attention_with_mask
from .reduction import ReductionTrace, ThresholdSet
from .train import TrainConfig, evaluate, ltmp_finetune, pretrain_backbone

__all__ = [
    "Checkpoint", "FlopsReport", "LTMPViT", "LossConfig", "ModelConfig", "ReductionTrace",
    "ThresholdSet", "TokenState", "TrainConfig", "attention_with_mask", "evaluate", "load_checkpoint",
    "ltmp_finetune", "phi_block", "pretrain_backbone", "r_flops", "reg_loss", "save_checkpoint",
    "total_loss",
]

__version__ = "0.1.0"
