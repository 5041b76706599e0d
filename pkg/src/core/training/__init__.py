from core.training.batching import BatchSampler, eval_batches, eval_windows
from core.training.optim import AdamW, zero_grads

__all__ = ["AdamW", "BatchSampler", "eval_batches", "eval_windows", "zero_grads"]
