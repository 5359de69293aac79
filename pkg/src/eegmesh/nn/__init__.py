"""Small numpy network engine with the layers of the CNN + Bi-LSTM model."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (
    ELU,
    BatchNorm,
    BatchTooSmall,
    BiLSTM,
    Dense,
    Dropout,
    InvalidRate,
    LabelOutOfRange,
    TimeDistConv3x3,
    TimeDistFlatten,
    softmax,
    softmax_xent,
)
from .model import EMBEDDING_TAP, ModelGraph, build_table1_model
from .optim import Adam
from .tensor import ShapeMismatch, Tensor

__all__ = [
    "Adam", "BatchNorm", "BatchTooSmall", "BiLSTM", "Checkpoint", "Dense", "Dropout", "ELU",
    "EMBEDDING_TAP", "InvalidRate", "LabelOutOfRange", "ModelGraph", "ShapeMismatch", "Tensor",
    "TimeDistConv3x3", "TimeDistFlatten", "build_table1_model", "load_checkpoint",
    "save_checkpoint", "softmax", "softmax_xent",
]
