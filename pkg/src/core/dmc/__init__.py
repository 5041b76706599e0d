from core.dmc.inference import (
    DecisionOutcome,
    DMCCaches,
    DMCHeadCache,
    compression_ratio,
    dmc_cache_update,
    dmc_decode_step,
    extract_scores,
)
from core.dmc.schedule import ScheduleTarget, schedule_target_cr
from core.dmc.training import (
    DMCAttention,
    RelaxedDecisions,
    TrainLosses,
    anneal_first_neuron,
    build_dmc_mask,
    cr_loss,
    dmc_train_forward,
    gumbel_sigmoid_sample,
    head_consistency_loss,
    partial_accumulate,
    windowed_accumulate,
)

__all__ = [
    "DMCAttention",
    "DMCCaches",
    "DMCHeadCache",
    "DecisionOutcome",
    "RelaxedDecisions",
    "ScheduleTarget",
    "TrainLosses",
    "anneal_first_neuron",
    "build_dmc_mask",
    "compression_ratio",
    "cr_loss",
    "dmc_cache_update",
    "dmc_decode_step",
    "dmc_train_forward",
    "extract_scores",
    "gumbel_sigmoid_sample",
    "head_consistency_loss",
    "partial_accumulate",
    "schedule_target_cr",
    "windowed_accumulate",
]
