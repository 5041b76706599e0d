"""
Decoder-only host transformer.

Two execution paths share one parameter set:

* `forward_lm`: parallel teacher-forced forward on `Tensor`s (recordable on a tape); the
  attention step is pluggable so the DMC relaxation can replace it.
* `decode_token`: one token at a time on raw numpy arrays; a `TokenMixer` owns the caches
  and decides how keys/values are stored (vanilla, DMC, eviction).

Head slicing: head h reads x[h*d_h:(h+1)*d_h] and applies its own d_h x d_h matrices.
With GQA (g query heads per key/value head) a key/value head reads the mean of its group's
input slices.
"""

from __future__ import annotations

from collections.abc import Callable
from typing import Protocol

import numpy as np

from app.errors import CapacityError, PreconditionError, SequenceLengthError, TokenIndexError
from core.dtos import ModelConfig
from core.enums import PositionScheme
from core.model.cache import KVSlots, ListSlots, VanillaHeadCache
from core.model.weights import LayerWeights, Params, init_params, layer_weights
from core.numerics import ops
from core.numerics.tensor import Tensor

AttentionFn = Callable[[int, Tensor, Tensor, Tensor], Tensor]


# ---------------------------------------------------------------------------
# Small numpy helpers shared with the decode paths
# ---------------------------------------------------------------------------


def rms_norm_np(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    scale = (np.mean(x * x, axis=-1, keepdims=True) + eps) ** -0.5
    return x * scale * gain


def silu_np(x: np.ndarray) -> np.ndarray:
    return x * ops._sigmoid_np(x)


def softmax_np(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - np.max(scores, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def rotary_block(config: ModelConfig) -> tuple[int, int]:
    """(start, width) of the rotated dimensions; dimension 0 is never rotated."""
    width = ((config.head_dim - 1) // 2) * 2
    return 1, width


def rotary_angles(config: ModelConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, width = rotary_block(config)
    half = width // 2
    inv_freq = config.rope_base ** (-np.arange(half, dtype=np.float64) / max(half, 1))
    angles = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    return np.cos(angles), np.sin(angles)


def apply_rotary_np(x: np.ndarray, config: ModelConfig, position: int) -> np.ndarray:
    if config.position_scheme is not PositionScheme.ROTARY_PRE_CACHE:
        return x
    start, width = rotary_block(config)
    half = width // 2
    cos, sin = rotary_angles(config, np.asarray(position))
    out = x.copy()
    a = x[..., start : start + half]
    b = x[..., start + half : start + width]
    out[..., start : start + half] = a * cos - b * sin
    out[..., start + half : start + width] = a * sin + b * cos
    return out


def apply_rotary(x: Tensor, config: ModelConfig) -> Tensor:
    """Rotate (..., n, d_h) by absolute position along axis -2."""
    if config.position_scheme is not PositionScheme.ROTARY_PRE_CACHE:
        return x
    n = x.shape[-2]
    start, width = rotary_block(config)
    half = width // 2
    cos, sin = rotary_angles(config, np.arange(n))
    cos, sin = cos.astype(x.dtype), sin.astype(x.dtype)
    a = x[..., start : start + half]
    b = x[..., start + half : start + width]
    parts = [x[..., :start], a * cos - b * sin, a * sin + b * cos]
    if start + width < x.shape[-1]:
        parts.append(x[..., start + width :])
    return ops.concat(parts, axis=-1)


def dim0_scale_vector(head_dim: int, scale: float, dtype) -> np.ndarray:
    vec = np.ones(head_dim, dtype=dtype)
    vec[0] = scale
    return vec


# ---------------------------------------------------------------------------
# Single-vector operations
# ---------------------------------------------------------------------------


def project_qkv(
    x_t: np.ndarray, layer: LayerWeights, head: int, *, gqa_groups: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """q, k, v of one query head for the (already normalised) hidden vector x_t."""
    d_h = layer.wq.shape[-1]
    slices = x_t.reshape(-1, d_h)
    kv_head = head // gqa_groups
    kv_in = slices[kv_head * gqa_groups : (kv_head + 1) * gqa_groups].mean(axis=0)
    q = layer.wq.data[head] @ slices[head]
    k = layer.wk.data[kv_head] @ kv_in
    v = layer.wv.data[kv_head] @ kv_in
    return q, k, v


def attention_weights(q: np.ndarray, keys: np.ndarray, *, exclude_dim0: bool = False) -> np.ndarray:
    if len(keys) == 0:
        raise PreconditionError("attend needs a nonempty cache")
    d_h = q.shape[-1]
    if exclude_dim0:
        scores = keys[:, 1:] @ q[1:]
    else:
        scores = keys @ q
    return softmax_np(scores / np.sqrt(d_h))


def attend(
    q: np.ndarray,
    cache: VanillaHeadCache | tuple[np.ndarray, np.ndarray],
    *,
    exclude_dim0: bool = False,
) -> np.ndarray:
    """Softmax(q·K/√d_h)·V over one head's cache; √d_h is kept when dim 0 is excluded."""
    keys, values = cache if isinstance(cache, tuple) else cache.slots.gather()
    weights = attention_weights(q, keys, exclude_dim0=exclude_dim0)
    return weights @ values


# ---------------------------------------------------------------------------
# Decode-time cache strategies
# ---------------------------------------------------------------------------


class TokenMixer(Protocol):
    """Owns one sequence's caches; `mix` stores the new keys/values and returns head outputs."""

    position: int

    def mix(self, layer: int, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    def lengths(self) -> list[list[int]]: ...


class VanillaCaches:
    """Append-only caches, one per (layer, key/value head)."""

    def __init__(
        self,
        config: ModelConfig,
        slot_factory: Callable[[int, int], KVSlots] | None = None,
    ) -> None:
        self.config = config
        self.position = 0
        make = slot_factory or (lambda layer, head: ListSlots())
        self.heads = [
            [VanillaHeadCache(slots=make(layer, head)) for head in range(config.n_kv_heads)]
            for layer in range(config.n_layers)
        ]

    def lengths(self) -> list[list[int]]:
        return [[len(c) for c in row] for row in self.heads]

    def mix(self, layer: int, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        g = self.config.gqa_groups
        row = self.heads[layer]
        for j, cache in enumerate(row):
            cache.append(k[j], v[j])
        out = np.empty_like(q)
        for h in range(q.shape[0]):
            out[h] = attend(q[h], row[h // g], exclude_dim0=self.config.attends_without_dim0)
        return out


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


class TransformerLM:
    def __init__(
        self,
        config: ModelConfig,
        params: Params | None = None,
        *,
        seed: int = 0,
        dtype=np.float64,
    ) -> None:
        self.config = config
        self.params: Params = params if params is not None else init_params(config, seed, dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.params["tok_emb"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def layer(self, index: int, params: Params | None = None) -> LayerWeights:
        return layer_weights(params or self.params, index)

    # --- parallel (training) path ---

    def vanilla_attention(self, dim0_scale: float | None = None) -> AttentionFn:
        """Causal attention; `dim0_scale` multiplies q[0] and k[0] (0 ignores dimension 0)."""
        if dim0_scale is None:
            dim0_scale = 0.0 if self.config.attends_without_dim0 else 1.0
        d_h = self.config.head_dim

        def attention(layer: int, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
            n = q.shape[-2]
            if dim0_scale != 1.0:
                scale = dim0_scale_vector(d_h, dim0_scale, q.dtype)
                q, k = q * scale, k * scale
            causal = np.triu(np.full((n, n), -np.inf, dtype=q.dtype), k=1)
            scores = ops.matmul(q, swap_last(k)) * (1.0 / np.sqrt(d_h))
            return ops.matmul(ops.softmax_masked(scores, causal), v)

        return attention

    def project_heads(self, h: Tensor, lw: LayerWeights) -> tuple[Tensor, Tensor, Tensor]:
        """(B, n, d) -> per-head q, k, v of shape (B, n_heads, n, d_h), positions applied."""
        cfg = self.config
        b, n, _ = h.shape
        hh = ops.transpose(h.reshape(b, n, cfg.n_heads, cfg.head_dim), (0, 2, 1, 3))
        q = ops.matmul(hh, swap_last(lw.wq))
        g = cfg.gqa_groups
        if g > 1:
            grouped = hh.reshape(b, cfg.n_kv_heads, g, n, cfg.head_dim)
            kv_in = ops.mean(grouped, axis=2)
        else:
            kv_in = hh
        k = ops.matmul(kv_in, swap_last(lw.wk))
        v = ops.matmul(kv_in, swap_last(lw.wv))
        if g > 1:
            expand = np.arange(cfg.n_heads) // g
            k = k[:, expand]
            v = v[:, expand]
        return apply_rotary(q, cfg), apply_rotary(k, cfg), v

    def hidden_states(
        self,
        tokens: np.ndarray,
        *,
        params: Params | None = None,
        attention: AttentionFn | None = None,
    ) -> Tensor:
        cfg = self.config
        p = params or self.params
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        b, n = tokens.shape
        if n > cfg.max_seq:
            raise SequenceLengthError(f"sequence of {n} tokens exceeds max_seq={cfg.max_seq}")
        attention = attention or self.vanilla_attention()
        x = ops.embedding(p["tok_emb"], tokens)
        if cfg.position_scheme is PositionScheme.ABSOLUTE_LEARNED:
            x = x + p["pos_emb"][:n]
        for index in range(cfg.n_layers):
            lw = layer_weights(p, index)
            h = ops.rms_norm(x, lw.attn_norm, cfg.norm_eps)
            q, k, v = self.project_heads(h, lw)
            o = attention(index, q, k, v)
            o = ops.transpose(o, (0, 2, 1, 3)).reshape(b, n, cfg.d_model)
            x = x + ops.matmul(o, lw.wo)
            h = ops.rms_norm(x, lw.ffn_norm, cfg.norm_eps)
            gated = ops.silu(ops.matmul(h, lw.w_gate)) * ops.matmul(h, lw.w_up)
            x = x + ops.matmul(gated, lw.w_down)
        return ops.rms_norm(x, p["final_norm"], cfg.norm_eps)

    def forward_lm(
        self,
        tokens: np.ndarray,
        *,
        params: Params | None = None,
        attention: AttentionFn | None = None,
    ) -> Tensor:
        """Teacher-forced logits, (n, vocab) for a 1-D input or (B, n, vocab) for a batch."""
        p = params or self.params
        single = np.asarray(tokens).ndim == 1
        x = self.hidden_states(tokens, params=p, attention=attention)
        logits = ops.matmul(x, p["lm_head"])
        return logits[0] if single else logits

    # --- sequential (decode) path ---

    def new_caches(self) -> VanillaCaches:
        return VanillaCaches(self.config)

    def decode_token(self, token: int, mixer: TokenMixer) -> np.ndarray:
        cfg = self.config
        pos = mixer.position
        if pos >= cfg.max_seq:
            raise CapacityError(f"cache already holds max_seq={cfg.max_seq} positions")
        p = {name: t.data for name, t in self.params.items()}
        if not 0 <= int(token) < cfg.vocab_size:
            raise TokenIndexError(f"token id {token} outside vocabulary of size {cfg.vocab_size}")
        x = p["tok_emb"][int(token)].copy()
        if cfg.position_scheme is PositionScheme.ABSOLUTE_LEARNED:
            x = x + p["pos_emb"][pos]
        g = cfg.gqa_groups
        for index in range(cfg.n_layers):
            pre = f"layers.{index}."
            h = rms_norm_np(x, p[pre + "attn_norm"], cfg.norm_eps)
            hh = h.reshape(cfg.n_heads, cfg.head_dim)
            kv_in = hh.reshape(cfg.n_kv_heads, g, cfg.head_dim).mean(axis=1) if g > 1 else hh
            q = np.einsum("hij,hj->hi", p[pre + "wq"], hh)
            k = np.einsum("hij,hj->hi", p[pre + "wk"], kv_in)
            v = np.einsum("hij,hj->hi", p[pre + "wv"], kv_in)
            q = apply_rotary_np(q, cfg, pos)
            k = apply_rotary_np(k, cfg, pos)
            o = mixer.mix(index, q, k, v)
            x = x + o.reshape(cfg.d_model) @ p[pre + "wo"]
            h = rms_norm_np(x, p[pre + "ffn_norm"], cfg.norm_eps)
            x = x + (silu_np(h @ p[pre + "w_gate"]) * (h @ p[pre + "w_up"])) @ p[pre + "w_down"]
        mixer.position = pos + 1
        x = rms_norm_np(x, p["final_norm"], cfg.norm_eps)
        return x @ p["lm_head"]

    def decode_step(self, token: int, caches: VanillaCaches) -> np.ndarray:
        """Append the token's keys/values to every head cache and return next-token logits."""
        return self.decode_token(token, caches)

    def decode_sequence(self, tokens: np.ndarray, mixer: TokenMixer | None = None) -> np.ndarray:
        mixer = mixer or self.new_caches()
        return np.stack([self.decode_token(int(t), mixer) for t in tokens])


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ops.transpose(x, axes)
