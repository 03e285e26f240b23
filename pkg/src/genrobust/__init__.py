"""Generative robust classification: per-class adversarially trained binary heads composed by Bayes' rule."""

__version__ = "0.1.0"

from .attacks import AttackBudget, adaptive_generative_attack, pgd_optimize, targeted_attack, untargeted_ce_attack
from .classifier import CalibrationConfig, GenerativeClassifier, calibrate, fit_calibration
from .data import LabelledDataset, class_partition, load_dataset, sample_training_pair
from .errors import (CalibrationWarning, ConfigurationError, DatasetLoadError, NumericError,
                     TrainingDiverged)
from .evaluation import adversarial_auroc, auroc, clean_auroc, epsilon_sweep, evaluate, robust_accuracy
from .interpret import counterfactual, fid, frechet_distance, generate_class_samples
from .training import TrainConfig, early_stop_select, train_binary_head, train_softmax_baseline

__all__ = [
    "AttackBudget", "adaptive_generative_attack", "pgd_optimize", "targeted_attack", "untargeted_ce_attack",
    "CalibrationConfig", "GenerativeClassifier", "calibrate", "fit_calibration",
    "LabelledDataset", "class_partition", "load_dataset", "sample_training_pair",
    "CalibrationWarning", "ConfigurationError", "DatasetLoadError", "NumericError", "TrainingDiverged",
    "adversarial_auroc", "auroc", "clean_auroc", "epsilon_sweep", "evaluate", "robust_accuracy",
    "counterfactual", "fid", "frechet_distance", "generate_class_samples",
    "TrainConfig", "early_stop_select", "train_binary_head", "train_softmax_baseline",
]
