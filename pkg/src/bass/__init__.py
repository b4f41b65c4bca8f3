"""Block-wise adaptation of a transformer summarizer for long speech-like inputs."""

from .estimator import BassSummarizer
from .inference import InferConfig, infer_block, infer_standard
from .model import ModelConfig, Summarizer
from .training import TrainConfig, bass_adapt, bass_train, train_truncated

__version__ = "0.1.0"

__all__ = [
    "BassSummarizer",
    "InferConfig",
    "ModelConfig",
    "Summarizer",
    "TrainConfig",
    "bass_adapt",
    "bass_train",
    "infer_block",
    "infer_standard",
    "train_truncated",
]
