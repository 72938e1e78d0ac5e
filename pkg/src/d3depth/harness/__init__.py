"""Synthetic data, training, evaluation and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .scenes import (
    DirectorySource,
    MixedSource,
    SceneSpec,
    SyntheticSource,
    generate_scene,
    preset_spec,
    scale_for_mixed,
    unscale,
)
from .training import (
    EvalRow,
    TrainConfig,
    TrainLog,
    desk_train_config,
    draw_batch,
    evaluate,
    lr_at,
    make_sparse,
    train,
    validation_loss,
)
