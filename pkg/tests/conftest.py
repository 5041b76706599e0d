import os
import sys

import numpy as np
import pytest

# Ensure repo root and 'src/' are on sys.path for imports like 'from core import dtos'
_REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if _REPO_ROOT not in sys.path:
    sys.path.insert(0, _REPO_ROOT)

_SRC_PATH = os.path.join(_REPO_ROOT, "src")
if _SRC_PATH not in sys.path:
    sys.path.insert(0, _SRC_PATH)

from app.settings import get_settings  # noqa: E402
from core.dtos import ExperimentConfig, ModelConfig  # noqa: E402
from core.model.transformer import TransformerLM  # noqa: E402
from tests.helpers import SAMPLE_TEXT, tiny_experiment, tiny_model_config  # noqa: E402


@pytest.fixture(autouse=True)
def _isolated_settings(tmp_path, monkeypatch):
    """Point every process-level directory at the test's tmp dir."""
    monkeypatch.setenv("DMC_REPORTS_DIR", str(tmp_path / "reports"))
    monkeypatch.setenv("DMC_CHECKPOINTS_DIR", str(tmp_path / "checkpoints"))
    monkeypatch.setenv("DMC_CORPUS_PATH", str(tmp_path / "missing_corpus.txt"))
    for name in list(os.environ):
        if name.startswith("DMC_EXP__"):
            monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def model_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def dmc_model_config() -> ModelConfig:
    return tiny_model_config(dmc_enabled=True, decision_offset=0.0)


@pytest.fixture
def model(model_config) -> TransformerLM:
    return TransformerLM(model_config, seed=0, dtype=np.float64)


@pytest.fixture
def dmc_model(dmc_model_config) -> TransformerLM:
    return TransformerLM(dmc_model_config, seed=1, dtype=np.float64)


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(SAMPLE_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def experiment(corpus_file) -> ExperimentConfig:
    return tiny_experiment(corpus_file)
