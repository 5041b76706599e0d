"""
Continuous DMC used while retrofitting.

During training every intermediate state of the mutating last slot is kept ("unrolled"), and
an additive mask of log(1 - alpha) values hides a state from later queries once the next
token merges into it. With discrete decisions this reproduces the decode-time cache exactly;
with relaxed decisions the visibility fades smoothly, so the decision logits receive gradient.

Shapes: q, k, v are (batch, heads, n, d_h); decisions are (batch, heads, n) per layer and
(layers, batch, heads, n) once stacked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.errors import DimensionError, PreconditionError, ScheduleError
from core.dtos import DMCConfig, GumbelParams, ModelConfig
from core.enums import CompressionPrior, DMCVariant
from core.model.transformer import TransformerLM, swap_last
from core.model.weights import Params
from core.numerics import ops
from core.numerics.tensor import Tensor

logger = logging.getLogger(__name__)

OMEGA_FLOOR = 1e-6
_CONFIG_WINDOW = object()


# ---------------------------------------------------------------------------
# Decision sampling
# ---------------------------------------------------------------------------


def gumbel_noise(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """g1 - g2 for two independent standard Gumbel draws (logistic noise)."""
    return (rng.gumbel(size=shape) - rng.gumbel(size=shape)).astype(dtype)


def gumbel_sigmoid_logits(
    logit: Tensor,
    params: GumbelParams,
    *,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> Tensor:
    """(logit - c + g1 - g2) / tau, the pre-sigmoid relaxed decision."""
    shifted = logit - params.c
    if not deterministic:
        if rng is None:
            rng = np.random.default_rng(params.rng_seed)
        shifted = shifted + gumbel_noise(logit.shape, rng, logit.dtype)
    return shifted * (1.0 / params.tau)


def gumbel_sigmoid_sample(
    logit: Tensor,
    params: GumbelParams,
    *,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> Tensor:
    return ops.sigmoid(gumbel_sigmoid_logits(logit, params, rng=rng, deterministic=deterministic))


# ---------------------------------------------------------------------------
# Partial accumulation
# ---------------------------------------------------------------------------


def _check_aligned(k: Tensor, v: Tensor, alpha: Tensor, omega: Tensor) -> int:
    n = k.shape[-2]
    if v.shape[-2] != n or alpha.shape[-1] != n or omega.shape[-1] != n:
        raise DimensionError(
            f"sequences disagree in length: k {k.shape}, v {v.shape}, "
            f"alpha {alpha.shape}, omega {omega.shape}"
        )
    return n


def _col(x: Tensor) -> Tensor:
    return x.reshape(x.shape + (1,))


def partial_accumulate(
    k: Tensor, v: Tensor, alpha: Tensor, omega: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """
    Running weighted means with relaxed decisions, one state per position.

    z_0 = w_0, k_0 unchanged; z_i = z_{i-1} a_i + w_i and
    k_i = (a_i k_{i-1} z_{i-1} + k_i w_i) / z_i (v likewise).
    """
    n = _check_aligned(k, v, alpha, omega)
    z_prev = omega[..., 0]
    k_prev = k[..., 0, :]
    v_prev = v[..., 0, :]
    zs, ks, vs = [z_prev], [k_prev], [v_prev]
    for i in range(1, n):
        a_i = alpha[..., i]
        w_i = omega[..., i]
        carry = _col(a_i * z_prev)
        z_i = a_i * z_prev + w_i
        denom = _col(z_i)
        k_prev = (carry * k_prev + k[..., i, :] * _col(w_i)) / denom
        v_prev = (carry * v_prev + v[..., i, :] * _col(w_i)) / denom
        z_prev = z_i
        zs.append(z_i)
        ks.append(k_prev)
        vs.append(v_prev)
    return ops.stack(ks, axis=-2), ops.stack(vs, axis=-2), ops.stack(zs, axis=-1)


def windowed_accumulate(
    k: Tensor, v: Tensor, alpha: Tensor, omega: Tensor, w: int
) -> tuple[Tensor, Tensor, Tensor]:
    """
    Each position accumulates only over its last `w` positions, the earliest of which acts as
    a fresh segment start. Runs in `w` vectorised steps instead of `n` sequential ones.
    """
    if w < 1:
        raise PreconditionError(f"window must be at least 1, got {w}")
    n = _check_aligned(k, v, alpha, omega)
    if w >= n:
        return partial_accumulate(k, v, alpha, omega)
    wk = k * _col(omega)
    wv = v * _col(omega)
    coef: Tensor | None = None
    k_sum, v_sum, z = wk, wv, omega
    for offset in range(1, w):
        step = ops.shift(alpha, offset - 1, axis=-1)
        coef = step if coef is None else coef * step
        k_sum = k_sum + _col(coef) * ops.shift(wk, offset, axis=-2)
        v_sum = v_sum + _col(coef) * ops.shift(wv, offset, axis=-2)
        z = z + coef * ops.shift(omega, offset, axis=-1)
    return k_sum / _col(z), v_sum / _col(z), z


# ---------------------------------------------------------------------------
# Mask
# ---------------------------------------------------------------------------


def build_dmc_mask(
    alpha: Tensor | None,
    n: int | None = None,
    *,
    relaxed_logits: Tensor | None = None,
) -> Tensor:
    """
    Additive (..., n, n) mask: 0 on the diagonal, -inf above it and log(1 - alpha_{j+1}) in
    column j below it. With `relaxed_logits` (alpha = sigmoid(x)) the entries come from
    log_sigmoid(-x), which stays accurate where alpha is close to 1.
    """
    source = relaxed_logits if relaxed_logits is not None else alpha
    if source is None:
        raise PreconditionError("build_dmc_mask needs alpha or relaxed_logits")
    n = source.shape[-1] if n is None else n
    if source.shape[-1] < n:
        raise DimensionError(f"decisions cover {source.shape[-1]} positions, mask needs {n}")
    source = source[..., :n]
    if relaxed_logits is not None:
        keep = ops.log_sigmoid(-source)
    else:
        keep = ops.log1m(source)
    return ops.dmc_additive_mask(ops.shift(keep, -1, axis=-1))


# ---------------------------------------------------------------------------
# Training forward
# ---------------------------------------------------------------------------


@dataclass
class RelaxedDecisions:
    """Per (layer, batch, head, position) decisions; `valid` masks padding as (batch, n)."""

    alpha: Tensor
    omega: Tensor
    valid: np.ndarray | None = None

    @property
    def n_layers(self) -> int:
        return self.alpha.shape[0]

    def valid_mask(self) -> np.ndarray:
        _, b, _, n = self.alpha.shape
        if self.valid is None:
            return np.ones((b, n), dtype=bool)
        return np.asarray(self.valid, dtype=bool)

    def discrete_alpha(self) -> np.ndarray:
        return (self.alpha.data >= 0.5).astype(np.int64)

    def kept_slots(self) -> np.ndarray:
        """Slots a discrete replay would hold, per (layer, batch, head)."""
        keep = (1 - self.discrete_alpha()) * self.valid_mask()[None, :, None, :]
        return keep.sum(axis=-1)

    def achieved_cr(self) -> float:
        seen = self.valid_mask().sum() * self.alpha.shape[0] * self.alpha.shape[2]
        return float(seen / max(int(self.kept_slots().sum()), 1))

    def achieved_cr_per_layer(self) -> list[float]:
        seen = self.valid_mask().sum() * self.alpha.shape[2]
        kept = self.kept_slots().sum(axis=(1, 2))
        return [float(seen / max(int(x), 1)) for x in kept]


def _first_token_off(shape: tuple[int, ...], dtype) -> np.ndarray:
    first = np.ones(shape, dtype=dtype)
    first[..., 0] = 0.0
    return first


class DMCAttention:
    """
    Attention callable for `TransformerLM.forward_lm` that runs the unrolled DMC path.

    Decision modes: sampled Gumbel-sigmoid (training), zero-noise relaxed
    (`stochastic=False`), hard round-half-up (`hard=True`, matches decoding), or scripted
    alphas broadcastable to (n_layers, batch, heads, n).
    """

    def __init__(
        self,
        config: ModelConfig,
        dmc: DMCConfig,
        *,
        rng: np.random.Generator | None = None,
        stochastic: bool = True,
        hard: bool = False,
        scripted_alpha: np.ndarray | None = None,
        scripted_omega: np.ndarray | None = None,
        window: int | None | object = _CONFIG_WINDOW,
        record_outputs: bool = False,
    ) -> None:
        self.config = config
        self.dmc = dmc
        self.rng = rng if rng is not None else np.random.default_rng(dmc.gumbel.rng_seed)
        self.stochastic = stochastic
        self.hard = hard
        self.scripted_alpha = scripted_alpha
        self.scripted_omega = scripted_omega
        self.window = dmc.window if window is _CONFIG_WINDOW else window
        self.alphas: list[Tensor] = []
        self.omegas: list[Tensor] = []
        self.outputs: list[np.ndarray] | None = [] if record_outputs else None

    def decisions(self, valid: np.ndarray | None = None) -> RelaxedDecisions:
        return RelaxedDecisions(ops.stack(self.alphas), ops.stack(self.omegas), valid)

    def _scripted(self, table: np.ndarray, layer: int, shape: tuple[int, ...], dtype) -> Tensor:
        full = np.broadcast_to(np.asarray(table, dtype=dtype), (self.config.n_layers,) + shape)
        return Tensor(np.array(full[layer]), dtype=dtype)

    def _decisions(self, layer: int, q: Tensor, k: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """alpha, omega and the mask column values for one layer."""
        shape = k.shape[:-1]
        decision = k[..., 0]
        importance = q[..., 0]
        zeros = np.zeros(shape, dtype=k.dtype)
        shared = self.dmc.variant.shares_decisions
        if shared:
            # one decision per (batch, position), noise included, spread over the heads after
            decision = decision.mean(axis=1, keepdims=True)
            importance = importance.mean(axis=1, keepdims=True) + zeros

        if self.dmc.variant is DMCVariant.UNIFORM_OMEGA:
            omega = Tensor(np.ones(shape, dtype=q.dtype))
        else:
            omega = ops.clamp_min(ops.sigmoid(importance), OMEGA_FLOOR)
        if self.scripted_omega is not None:
            omega = self._scripted(self.scripted_omega, layer, shape, q.dtype)

        if self.scripted_alpha is not None:
            scripted = self._scripted(self.scripted_alpha, layer, shape, k.dtype)
            alpha = scripted * _first_token_off(shape, k.dtype)
            return alpha, omega, build_dmc_mask(alpha)
        first = _first_token_off(decision.shape, k.dtype)
        if self.hard:
            hard = (decision.data - self.dmc.gumbel.c >= 0).astype(k.dtype) * first
            alpha = Tensor(hard + zeros)
            return alpha, omega, build_dmc_mask(alpha)
        logits = gumbel_sigmoid_logits(
            decision, self.dmc.gumbel, rng=self.rng, deterministic=not self.stochastic
        )
        alpha = ops.sigmoid(logits) * first
        if shared:
            logits = logits + zeros
            alpha = alpha + zeros
        return alpha, omega, build_dmc_mask(None, relaxed_logits=logits)

    def __call__(self, layer: int, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        d_h = q.shape[-1]
        n = q.shape[-2]
        alpha, omega, mask = self._decisions(layer, q, k)
        self.alphas.append(alpha)
        self.omegas.append(omega)
        if self.window is None or self.window >= n:
            k_bar, v_bar, _ = partial_accumulate(k[..., 1:], v, alpha, omega)
        else:
            k_bar, v_bar, _ = windowed_accumulate(k[..., 1:], v, alpha, omega, self.window)
        scores = ops.matmul(q[..., 1:], swap_last(k_bar)) * (1.0 / np.sqrt(d_h))
        out = ops.matmul(ops.softmax_masked(scores, mask), v_bar)
        if self.outputs is not None:
            self.outputs.append(out.data.copy())
        return out


def split_batch(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    return batch[:, :-1], batch[:, 1:]


def dmc_train_forward(
    model: TransformerLM,
    batch: np.ndarray,
    dmc: DMCConfig,
    *,
    attention: DMCAttention | None = None,
    params: Params | None = None,
    targets: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> tuple[Tensor, RelaxedDecisions]:
    """
    Teacher-forced LM loss through the DMC attention path.

    Without `targets`, `batch` holds n + 1 tokens per row and is split into inputs and
    next-token targets. Returns the loss and the stacked decisions for the auxiliary losses.
    """
    if not model.config.dmc_enabled:
        raise PreconditionError("dmc_train_forward needs a model with dmc_enabled")
    if targets is None:
        inputs, targets = split_batch(batch)
    else:
        inputs = np.atleast_2d(np.asarray(batch, dtype=np.int64))
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    attention = attention or DMCAttention(model.config, dmc)
    logits = model.forward_lm(inputs, params=params, attention=attention)
    if valid is not None:
        targets = np.where(valid, targets, ops.IGNORE_INDEX)
    loss = ops.cross_entropy_lm(logits, targets)
    return loss, attention.decisions(valid)


# ---------------------------------------------------------------------------
# Auxiliary losses
# ---------------------------------------------------------------------------


def cr_loss(
    decisions: RelaxedDecisions,
    target_cr: float,
    *,
    prior: CompressionPrior = CompressionPrior.GLOBAL,
) -> Tensor:
    """
    One-sided budget loss max(0, sum(1 - alpha) - N / CR) / N with N = n_l * n_h * n.

    Computed per sequence and averaged over the batch. The local prior applies the budget to
    every layer separately and sums the layers' excesses.
    """
    if target_cr < 1.0:
        raise PreconditionError(f"target compression ratio must be >= 1, got {target_cr}")
    n_l, b, n_h, _ = decisions.alpha.shape
    valid = decisions.valid_mask()
    counts = valid.sum(axis=-1).astype(decisions.alpha.dtype)
    total = n_l * n_h * np.maximum(counts, 1.0)
    keep = (1.0 - decisions.alpha) * valid[None, :, None, :].astype(decisions.alpha.dtype)
    if prior is CompressionPrior.LOCAL:
        kept = keep.sum(axis=(2, 3))
        budget = (n_h * counts / target_cr)[None, :]
        excess = ops.relu(kept - budget).sum(axis=0)
    else:
        kept = keep.sum(axis=(0, 2, 3))
        excess = ops.relu(kept - n_l * n_h * counts / target_cr)
    return (excess / total).sum() * (1.0 / b)


def head_consistency_loss(decisions: RelaxedDecisions) -> Tensor:
    """sum |alpha_h - mean over heads of alpha| over layers, heads and positions, over N."""
    n_l, _, n_h, _ = decisions.alpha.shape
    valid = decisions.valid_mask()
    mean = decisions.alpha.mean(axis=2, keepdims=True)
    dev = ops.abs(decisions.alpha - mean) * valid[None, :, None, :].astype(decisions.alpha.dtype)
    return dev.sum() * (1.0 / (n_l * n_h * max(int(valid.sum()), 1)))


@dataclass
class TrainLosses:
    lm: Tensor
    cr: Tensor
    head_consistency: Tensor | None
    total: Tensor

    def as_floats(self) -> dict[str, float | None]:
        return {
            "lm_loss": self.lm.item(),
            "cr_loss": self.cr.item(),
            "head_loss": None if self.head_consistency is None else self.head_consistency.item(),
        }


def combine_losses(
    lm: Tensor,
    decisions: RelaxedDecisions,
    target_cr: float,
    dmc: DMCConfig,
) -> TrainLosses:
    cr = cr_loss(decisions, target_cr, prior=dmc.prior)
    total = lm + cr
    head = None
    if dmc.variant.uses_head_consistency:
        head = head_consistency_loss(decisions)
        total = total + head
    return TrainLosses(lm=lm, cr=cr, head_consistency=head, total=total)


# ---------------------------------------------------------------------------
# First-neuron annealing
# ---------------------------------------------------------------------------


def anneal_factor(step: int, n_t: int) -> float:
    if step < 0 or step > n_t:
        raise ScheduleError(f"annealing step {step} outside [0, {n_t}]")
    if n_t == 0:
        return 0.0
    return 1.0 - step / n_t


def anneal_first_neuron(q0: float, k0: float, step: int, n_t: int) -> tuple[float, float]:
    factor = anneal_factor(step, n_t)
    return q0 * factor, k0 * factor
