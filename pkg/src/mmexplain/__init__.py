"""Answer, textual explanation and visual explanation for scene-text VQA."""

from .core import DESK_CONFIG, ModelConfig, Sample, Vocabulary, load_config, save_config
from .model import ExplainNet, build_model_vocab, collate, prepare_all
from .training import TrainConfig, evaluate, load_model, multitask_loss, train

__all__ = [
    "DESK_CONFIG",
    "ExplainNet",
    "ModelConfig",
    "Sample",
    "TrainConfig",
    "Vocabulary",
    "build_model_vocab",
    "collate",
    "evaluate",
    "load_config",
    "load_model",
    "multitask_loss",
    "prepare_all",
    "save_config",
    "train",
]
