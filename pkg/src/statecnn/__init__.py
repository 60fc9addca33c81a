"""Object-state image classification with a from-scratch numpy CNN.

A 16-layer classification head sits on a pluggable backbone and is trained
with a two-stage transfer-learning protocol: head first with the backbone
frozen, then fine-tuning of the top backbone units.
"""
from .errors import (CheckpointError, ConfigError, IngestionError, InputError, PartitionError,
                     ShapeError, StateCNNError, StateError)
from .model import ShapeOnlyBackbone, StateClassifier, TinyBackbone, build, set_trainable, summarize

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "IngestionError", "InputError", "PartitionError",
    "ShapeError", "StateCNNError", "StateError", "ShapeOnlyBackbone", "StateClassifier",
    "TinyBackbone", "build", "set_trainable", "summarize",
]
