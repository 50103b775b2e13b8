"""Block-parallel speculative decoding on a desk-scale transformer stack.

A small autoregressive target model is accelerated losslessly by a block
drafter that proposes a whole block of tokens in one parallel forward,
conditioned on the target's own hidden features through per-layer KV
injection. The package covers data generation, target and drafter training,
the verification engine, and a latency/speedup analytics harness.
"""

__version__ = "0.1.0"

from .corpus import Sample, Vocab
from .drafter import DraftConfig, DraftModel
from .engine import DecodeMetrics, spec_decode
from .errors import BlockspecError, ConfigError, ContractError, NumericError, ShapeError
from .target import TargetConfig, TargetModel, select_tap_layers
from .trainer import TrainConfig, train_drafter

__all__ = [
    "Sample",
    "Vocab",
    "DraftConfig",
    "DraftModel",
    "DecodeMetrics",
    "spec_decode",
    "BlockspecError",
    "ConfigError",
    "ContractError",
    "NumericError",
    "ShapeError",
    "TargetConfig",
    "TargetModel",
    "select_tap_layers",
    "TrainConfig",
    "train_drafter",
]
