"""Conversion-rate prediction with occasion prototypes and learnable distance metrics."""
from .estimators import BaseCVRClassifier, FineTunedCVRClassifier, MetaCVRClassifier
from .featurespace import OCCASIONS, Dataset, FeatureSchema, load_dataset
from .metric_ensemble import MetricKind
from .prototypes import PrototypeBank
from .trainer import ModelCheckpoint, TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["BaseCVRClassifier", "FineTunedCVRClassifier", "MetaCVRClassifier", "OCCASIONS",
           "Dataset", "FeatureSchema", "load_dataset", "MetricKind", "PrototypeBank",
           "ModelCheckpoint", "TrainConfig", "load_checkpoint", "save_checkpoint"]
