"""Joint HSE density regression and LCZ classification with a multi-task CNN."""
from .core import (
    IGNORE,
    LCZ_CLASSES,
    ConfigError,
    Group,
    ModelConfig,
    SampleBatch,
    TaskWeights,
    class_group,
    validate_config,
)
from .losses import lcz_cross_entropy, multitask_loss, optimal_task_weights, weighted_mae
from .model import MTLNet, ModelOutput, PriorSource, model_forward, parameter_groups
from .train import TrainConfig, Weighting, fit, load_checkpoint, lr_at_epoch, save_checkpoint

__version__ = "0.1.0"
