"""Grouped-query conversion of a trained checkpoint by averaging key/value heads."""

from __future__ import annotations

import logging
from dataclasses import replace

from app.errors import ConfigError
from core.dtos import GQAConfig, ModelConfig
from core.model.weights import LayerWeights, Params, layer_weights, replace_layer
from core.numerics.tensor import Tensor

logger = logging.getLogger(__name__)


def _average_groups(w: Tensor, g: int) -> Tensor:
    heads, d_out, d_in = w.shape
    data = w.data.reshape(heads // g, g, d_out, d_in).mean(axis=1)
    return Tensor(data, requires_grad=w.requires_grad, dtype=w.dtype, name=w.name)


def gqa_convert(weights: LayerWeights, g: int | GQAConfig) -> LayerWeights:
    """Replace each group of g key/value matrices by their mean; queries are untouched."""
    g = g.group_size if isinstance(g, GQAConfig) else g
    heads = weights.wk.shape[0]
    if g < 1 or heads % g:
        raise ConfigError(f"{heads} key/value heads cannot be split into groups of {g}")
    if g == 1:
        return weights
    return replace(weights, wk=_average_groups(weights.wk, g), wv=_average_groups(weights.wv, g))


def gqa_convert_params(
    params: Params, config: ModelConfig, g: int
) -> tuple[Params, ModelConfig]:
    """Convert every layer and return the parameters with the matching grouped config."""
    if config.gqa_groups != 1:
        raise ConfigError("checkpoint is already grouped")
    if config.dmc_enabled:
        raise ConfigError("DMC and GQA key/value sharing cannot be combined")
    new_config = ModelConfig.model_validate({**config.model_dump(), "gqa_groups": g})
    out = dict(params)
    for layer in range(config.n_layers):
        out = replace_layer(out, layer, gqa_convert(layer_weights(out, layer), g))
    logger.info("converted %d layers to %d key/value heads", config.n_layers, new_config.n_kv_heads)
    return out, new_config
