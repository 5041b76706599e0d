"""Unit tests for the decode benchmark."""

import numpy as np
import pytest

from app.errors import CapacityError
from core.enums import EvalMode
from core.services.bench_service import BenchService, default_methods
from infra.paging import PagedStore

pytestmark = pytest.mark.unit

PROMPT, GEN = 6, 6


@pytest.fixture
def prompts() -> np.ndarray:
    return np.random.default_rng(2).integers(0, 256, size=(2, PROMPT))


def _by_method(record):
    return {run.method: run for run in record.runs}


def test_default_methods(model, dmc_model):
    assert default_methods(model) == [EvalMode.VANILLA, EvalMode.H2O, EvalMode.TOVA]
    assert EvalMode.FIXED_POOL in default_methods(dmc_model, pool_width=2)
    assert EvalMode.DMC_INFER_PATH in default_methods(dmc_model)


def test_vanilla_holds_every_position(model, prompts):
    record = BenchService().bench_decode(model, prompts, GEN, methods=["vanilla"])
    run = record.runs[0]
    assert run.peak_kv_slots == 2 * 2 * 2 * (PROMPT + GEN)
    assert run.vanilla_kv_slots == run.peak_kv_slots
    assert run.measured_cr == 1.0
    assert run.peak_kv_elements == run.peak_kv_slots * 2 * model.config.head_dim
    assert run.memory is None


def test_compressing_methods_hold_fewer_slots(dmc_model, prompts):
    record = BenchService().bench_decode(
        dmc_model, prompts, GEN, methods=["fixed-pool", "tova"], cr=2.0, pool_width=2
    )
    runs = _by_method(record)
    assert runs["fixed-pool"].measured_cr == 2.0
    assert runs["tova"].measured_cr > 1.0
    assert record.batch == 2 and record.prompt_len == PROMPT and record.gen_len == GEN


def test_paged_store_reports_memory(dmc_model, prompts):
    service = BenchService(new_store=lambda cfg, dtype: PagedStore(cfg.head_dim, page_size=4))
    record = service.bench_decode(
        dmc_model, prompts, GEN, methods=["vanilla", "fixed-pool"], pool_width=3
    )
    runs = _by_method(record)
    vanilla = runs["vanilla"].memory
    assert vanilla.total_logical == 2 * 2 * 2 * (PROMPT + GEN)
    assert vanilla.total_pages == 2 * 2 * 2 * 3
    pooled = runs["fixed-pool"].memory
    assert pooled.total_logical == 2 * 2 * 2 * 4
    assert pooled.compression_ratio == 3.0


def test_prompt_and_generation_must_fit(model):
    with pytest.raises(CapacityError):
        BenchService().bench_decode(model, np.zeros((1, 60), dtype=np.int64), 10)
