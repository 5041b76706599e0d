from core.baselines.eviction import (
    EvictionCaches,
    EvictionState,
    eviction_budget,
    h2o_evict,
    tova_evict,
)
from core.baselines.gqa import gqa_convert, gqa_convert_params
from core.baselines.pooling import fixed_pool, fixed_pool_decisions

__all__ = [
    "EvictionCaches",
    "EvictionState",
    "eviction_budget",
    "fixed_pool",
    "fixed_pool_decisions",
    "gqa_convert",
    "gqa_convert_params",
    "h2o_evict",
    "tova_evict",
]
