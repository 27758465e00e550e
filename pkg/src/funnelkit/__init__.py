"""Funnel-style sequence compression for a small Gemma2-like transformer."""

from .errors import ConfigError, FunnelError, InputError, ParseError, ShapeError, UsageError
from .funnel import FunnelConfig, LayerCache, RecoveryOp, max_pool_seq, pool_positions, recover, tile_upsample
from .model import (
    ModelConfig,
    ModelState,
    PoolerConfig,
    forward,
    forward_sentence,
    forward_tokens,
    init_model,
    load_checkpoint,
    param_count,
    rope_apply,
    save_checkpoint,
)
from .numerics import GradTape, Tensor

__all__ = [
    "ConfigError", "FunnelError", "InputError", "ParseError", "ShapeError", "UsageError",
    "FunnelConfig", "LayerCache", "RecoveryOp", "max_pool_seq", "pool_positions", "recover", "tile_upsample",
    "ModelConfig", "ModelState", "PoolerConfig", "forward", "forward_sentence", "forward_tokens", "init_model",
    "load_checkpoint", "param_count", "rope_apply", "save_checkpoint",
    "GradTape", "Tensor",
]

__version__ = "0.1.0"
