from core.model.cache import KVSlots, ListSlots, VanillaHeadCache
from core.model.checkpoint import Checkpoint, snapshot
from core.model.transformer import (
    TokenMixer,
    TransformerLM,
    VanillaCaches,
    attend,
    project_qkv,
)
from core.model.weights import LayerWeights, Params, init_params

__all__ = [
    "Checkpoint",
    "KVSlots",
    "LayerWeights",
    "ListSlots",
    "Params",
    "TokenMixer",
    "TransformerLM",
    "VanillaCaches",
    "VanillaHeadCache",
    "attend",
    "init_params",
    "project_qkv",
    "snapshot",
]
