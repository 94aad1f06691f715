from src.services.rstar4d.checkpoint import load_checkpoint, save_checkpoint
from src.services.rstar4d.network import (
    Iso4DConvBlock,
    Network,
    SepConv4DBlock,
    build_network,
    count_params_flops,
    forward_full,
    forward_tiled,
    l1_loss,
    to_isotropic,
)
from src.services.rstar4d.optim import AdamState, LogLinearSchedule, adam_step
from src.services.rstar4d.tetris import (
    TetrisTrainer,
    TrainingPair,
    build_desk_dataset,
    read_manifest,
    tetris_stage1,
    tetris_stage2,
    train,
)

__all__ = [
    "AdamState",
    "Iso4DConvBlock",
    "LogLinearSchedule",
    "Network",
    "SepConv4DBlock",
    "TetrisTrainer",
    "TrainingPair",
    "adam_step",
    "build_desk_dataset",
    "build_network",
    "count_params_flops",
    "forward_full",
    "forward_tiled",
    "l1_loss",
    "load_checkpoint",
    "read_manifest",
    "save_checkpoint",
    "tetris_stage1",
    "tetris_stage2",
    "to_isotropic",
    "train",
]
