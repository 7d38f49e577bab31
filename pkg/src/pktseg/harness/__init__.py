"""Experiment harness: configs, folds, train/evaluate loops, ablation grid, CLI."""
from .config import FULL_GRID, ExperimentConfig, desk_preset, load_config, full_preset
from .folds import FoldAssignment, make_folds
from .training import StudyCache, TrainResult, evaluate, load_model, train

__all__ = [
    "ExperimentConfig", "load_config", "desk_preset", "full_preset", "FULL_GRID",
    "FoldAssignment", "make_folds", "StudyCache", "TrainResult", "train", "evaluate", "load_model",
]
