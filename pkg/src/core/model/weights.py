"""Parameter naming, initialisation and the per-layer weight view."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.errors import CheckpointShapeError
from core.dtos import ModelConfig
from core.enums import PositionScheme
from core.numerics.tensor import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class LayerWeights:
    """
    One block's weights.

    wq: (n_heads, d_h, d_h), q^h = W_q^h x^h on the head's input slice
    wk, wv: (n_kv_heads, d_h, d_h), one matrix per key/value head
    wo: (d, d), applied to the concatenated head outputs
    """

    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


LAYER_FIELDS = tuple(LayerWeights.__dataclass_fields__)


def layer_key(layer: int, field: str) -> str:
    return f"layers.{layer}.{field}"


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dh, f = config.d_model, config.head_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (config.vocab_size, d)}
    if config.position_scheme is PositionScheme.ABSOLUTE_LEARNED:
        shapes["pos_emb"] = (config.max_seq, d)
    for layer in range(config.n_layers):
        shapes[layer_key(layer, "attn_norm")] = (d,)
        shapes[layer_key(layer, "wq")] = (config.n_heads, dh, dh)
        shapes[layer_key(layer, "wk")] = (config.n_kv_heads, dh, dh)
        shapes[layer_key(layer, "wv")] = (config.n_kv_heads, dh, dh)
        shapes[layer_key(layer, "wo")] = (d, d)
        shapes[layer_key(layer, "ffn_norm")] = (d,)
        shapes[layer_key(layer, "w_gate")] = (d, f)
        shapes[layer_key(layer, "w_up")] = (d, f)
        shapes[layer_key(layer, "w_down")] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, config.vocab_size)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        elif name.endswith(("wo", "w_down")):
            # residual projections start smaller so the stack stays well conditioned
            data = rng.normal(0.0, config.init_std / np.sqrt(2 * config.n_layers), size=shape)
        else:
            data = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def check_shapes(config: ModelConfig, arrays: dict[str, np.ndarray]) -> None:
    expected = expected_shapes(config)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(
            "parameter names do not match the model configuration",
            details={"missing": missing, "unexpected": extra},
        )
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != shape:
            raise CheckpointShapeError(
                f"{name} has shape {tuple(arrays[name].shape)}, expected {shape}"
            )


def layer_weights(params: Params, layer: int) -> LayerWeights:
    return LayerWeights(**{f: params[layer_key(layer, f)] for f in LAYER_FIELDS})


def replace_layer(params: Params, layer: int, weights: LayerWeights) -> Params:
    out = dict(params)
    for f in LAYER_FIELDS:
        out[layer_key(layer, f)] = getattr(weights, f)
    return out
