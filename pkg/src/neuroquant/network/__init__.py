"""From-scratch 3D MBConv classifier: layers, model, training, checkpoints."""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from .model import (BlockSpec, ForwardResult, MBConvNet, NetworkConfig, NetworkParams, PRESETS,
                    bce_with_logits, preset)
from .train import (AdamState, EpochRecord, TrainingConfig, TrainResult, adam_step, aggregate_fold_scores,
                    lr_at_epoch, train, write_epoch_log)

__all__ = [
    "AdamState", "BlockSpec", "EpochRecord", "ForwardResult", "MBConvNet", "NetworkConfig", "NetworkParams",
    "PRESETS", "TrainResult", "TrainingConfig", "adam_step", "aggregate_fold_scores", "bce_with_logits",
    "load_checkpoint", "lr_at_epoch", "preset", "read_checkpoint", "save_checkpoint", "train",
    "write_checkpoint", "write_epoch_log",
]
