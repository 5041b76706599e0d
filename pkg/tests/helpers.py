"""Small builders shared by the test modules."""

from core.dtos import ExperimentConfig, ModelConfig

SAMPLE_TEXT = (
    "The lighthouse keeper climbed the stairs every evening and lit the lamp. "
    "Ships passed in the night, and the beam swept across the water. "
    "In the morning he wrote the weather in a small book: wind from the west, "
    "light rain, a calm sea by noon. "
) * 12


def tiny_model_config(**overrides) -> ModelConfig:
    """Two layers, two heads of width 8; enough to reach every code path quickly."""
    base = {
        "n_layers": 2,
        "n_heads": 2,
        "d_model": 16,
        "vocab_size": 256,
        "max_seq": 64,
        "ffn_mult": 2,
        "init_std": 0.3,
    }
    base.update(overrides)
    return ModelConfig(**base)


def tiny_experiment(corpus_path, **sections) -> ExperimentConfig:
    """Experiment sized for unit tests; `sections` merge into the defaults per section."""
    raw = {
        "model": tiny_model_config().model_dump(),
        "dmc": {
            "adaptation_steps": 2,
            "window": 4,
            "schedule": {"target_cr": 2.0, "ramp_steps": 4, "solidify_steps": 2},
        },
        "optimizer": {"lr": 1e-2},
        "data": {
            "corpus_path": str(corpus_path),
            "batch_size": 2,
            "seq_len": 16,
            "eval_batches": 1,
        },
        "run": {
            "name": "unit",
            "seed": 3,
            "dtype": "float64",
            "pretrain_steps": 3,
            "log_every": 1,
            "eval_every": 2,
        },
    }
    for section, values in sections.items():
        merged = dict(raw.get(section, {}))
        for key, value in values.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        raw[section] = merged
    return ExperimentConfig(**raw)


TINY_TOML = """\
[model]
n_layers = 2
n_heads = 2
d_model = 16
max_seq = 64
ffn_mult = 2
init_std = 0.3

[dmc]
adaptation_steps = 2
window = 4

[dmc.schedule]
target_cr = 2.0
ramp_steps = 4
solidify_steps = 2

[optimizer]
lr = 1e-2

[data]
corpus_path = "corpus.txt"
batch_size = 2
seq_len = 16
eval_batches = 1

[run]
name = "unit"
seed = 3
dtype = "float64"
pretrain_steps = 3
log_every = 1
eval_every = 2
"""


def write_tiny_config(directory, *, text: str = SAMPLE_TEXT):
    """TOML experiment plus the corpus it points at (relative to the file)."""
    (directory / "corpus.txt").write_text(text, encoding="utf-8")
    path = directory / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path
