"""Correlation-aware domain adaptation for semantic segmentation at desk scale."""

from .datasets import Domain, DomainShiftConfig, DatasetManifest, Sample
from .losses import LossWeights, total_loss
from .model import CorDANet, ModelConfig, ModelOutput
from .selftrain import TrainConfig, Variant, train

__version__ = "0.1.0"
