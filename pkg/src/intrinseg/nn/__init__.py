"""Reverse-mode tensor engine and the encoder-decoder network."""

from .tensor import (
    DEBUG_NAN_CHECK,
    GraphError,
    Tensor,
    as_tensor,
    batch_norm,
    concat_channels,
    conv2d,
    gather_channel,
    log_softmax_channel,
    relu,
    softmax_channel,
    upsample_nearest2x,
)
from .model import (
    DEFAULT_FEATURES,
    HEAD_NAMES,
    FULL_SCALE_FEATURES,
    NetworkSpec,
    NetworkState,
    forward,
)
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint

__all__ = [
    "DEBUG_NAN_CHECK",
    "GraphError",
    "Tensor",
    "as_tensor",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "gather_channel",
    "log_softmax_channel",
    "relu",
    "softmax_channel",
    "upsample_nearest2x",
    "DEFAULT_FEATURES",
    "HEAD_NAMES",
    "FULL_SCALE_FEATURES",
    "NetworkSpec",
    "NetworkState",
    "forward",
    "CheckpointFormatError",
    "load_checkpoint",
    "save_checkpoint",
]
