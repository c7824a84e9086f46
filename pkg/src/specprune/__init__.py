"""Speculative decoding with a sensitivity-pruned draft model, at desk scale."""

__version__ = "0.1.0"

from .model import KvCache, Model, ModelConfig, SublayerId, SublayerKind
from .pruning import PruneSet
from .specdec import GenerationParams, SpecRound

__all__ = [
    "GenerationParams",
    "KvCache",
    "Model",
    "ModelConfig",
    "PruneSet",
    "SpecRound",
    "SublayerId",
    "SublayerKind",
    "__version__",
]
