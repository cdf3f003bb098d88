"""Variational bound terms for the fused-sequence diffusion.

``L0`` is the reconstruction NLL at t = 1, ``L_{t-1}`` the KL between the true
posterior and the model's x0-parameterized reverse step (each position uses
its own modality's posterior; positions of different modalities sit side by
side in one sequence), and ``LT`` the prior mismatch, which has no parameter
dependence and is reported but never optimized.

Per-position terms are summed within a sequence. Probabilities are clamped
at :data:`LOG_FLOOR` inside every log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .kernel import (CategoricalField, local_tokens, q_xt_given_x0, reverse_coefficients,
                     reverse_distribution, sample_forward, stationary_prior)
from .layout import TokenSequence
from .schedule import NoiseSchedule

LOG_FLOOR = 1e-30


@dataclass
class LossBreakdown:
    """Per-sequence loss terms; arrays carry one entry per batch element."""

    l0: np.ndarray
    lt: np.ndarray
    lT: np.ndarray
    total: np.ndarray
    t_sampled: np.ndarray
    loss: Tensor | None = None

    def mean(self) -> dict:
        return {k: float(np.mean(getattr(self, k))) for k in ("l0", "lt", "lT", "total")}


def _kl(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    live = q > 0
    qs = np.where(live, q, 1.0)
    return np.where(live, q * (np.log(qs) - np.log(np.maximum(p, LOG_FLOOR))), 0.0).sum(-1)


def _onehot_field(x0_seq: TokenSequence) -> list[np.ndarray]:
    layout = x0_seq.layout
    return [np.eye(k)[x0_seq.segment_tokens(m) - layout.offsets[m]] for m, k in enumerate(layout.sizes)]


def _masked_sum(per_pos: np.ndarray, loss_mask) -> np.ndarray:
    if loss_mask is not None:
        per_pos = per_pos * loss_mask
    return per_pos.sum(-1)


def l0_term(x0_seq: TokenSequence, x1_seq: TokenSequence, x0_probs, schedule: NoiseSchedule,
            loss_mask=None) -> np.ndarray:
    """``-log p(x0 | x1)`` summed over positions, p from the x0-parameterized step 1 -> 0."""
    if x0_seq.num_positions == 0:
        return np.zeros(x0_seq.indices.shape[:-1])
    model = reverse_distribution(1, x1_seq, x0_probs, schedule, s=0).dense()
    picked = np.take_along_axis(model, x0_seq.indices[..., None], axis=-1)[..., 0]
    return _masked_sum(-np.log(np.maximum(picked, LOG_FLOOR)), loss_mask)


def true_posterior(t: int, x0_seq: TokenSequence, xt_seq: TokenSequence, schedule: NoiseSchedule,
                   s: int | None = None) -> CategoricalField:
    return reverse_distribution(t, xt_seq, _onehot_field(x0_seq), schedule, s=s)


def lt_term(t: int, x0_seq: TokenSequence, xt_seq: TokenSequence, model_posterior: CategoricalField,
            schedule: NoiseSchedule, loss_mask=None) -> np.ndarray:
    """KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t)) summed over positions."""
    if x0_seq.num_positions == 0:
        return np.zeros(x0_seq.indices.shape[:-1])
    q = true_posterior(t, x0_seq, xt_seq, schedule).dense()
    return _masked_sum(_kl(q, model_posterior.dense()), loss_mask)


def lT_term(x0_seq: TokenSequence, schedule: NoiseSchedule) -> np.ndarray:
    """KL(q(x_T | x0) || p(x_T)) summed over positions; zero for the linear plan."""
    layout = x0_seq.layout
    if x0_seq.num_positions == 0:
        return np.zeros(x0_seq.indices.shape[:-1])
    q = q_xt_given_x0(schedule.T, x0_seq.indices, schedule, layout)
    prior = stationary_prior(schedule, layout)[x0_seq.position_modality]
    return _kl(q, prior).sum(-1)


def _batch_coefficients(xt_local: np.ndarray, k: int, s: np.ndarray, t: np.ndarray, schedule, dtype):
    """Stack :func:`reverse_coefficients` over a batch whose levels differ per row."""
    c = np.empty(xt_local.shape + (k,))
    r = np.empty_like(c)
    mask_coef = np.empty(xt_local.shape)
    scal = np.empty((xt_local.shape[0], 3))
    for b in range(xt_local.shape[0]):
        c[b], r[b], mask_coef[b], *rest = reverse_coefficients(xt_local[b], k, int(s[b]), int(t[b]), schedule)
        scal[b] = rest
    bb_s, ab_s, gb_s = (scal[:, i].reshape(-1, 1, 1) for i in range(3))
    return (c.astype(dtype), r.astype(dtype), (mask_coef[..., None] * gb_s).astype(dtype),
            bb_s.astype(dtype), ab_s.astype(dtype))


def term_tensor(logp: list[Tensor], x0_seq: TokenSequence, xt_seq: TokenSequence, t: np.ndarray,
                schedule: NoiseSchedule, loss_mask=None) -> Tensor:
    """Differentiable per-sequence term: L0 where t == 1, L_{t-1} elsewhere.

    Both reduce to KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t)) because the
    true posterior at t = 1 is a point mass on x0.
    """
    layout = x0_seq.layout
    t = np.asarray(t)
    s = t - 1
    total = None
    for m, k in enumerate(layout.sizes):
        pos = x0_seq.positions(m)
        if pos.size == 0:
            continue
        dtype = logp[m].data.dtype
        xt_local = local_tokens(xt_seq, m)
        x0_local = x0_seq.segment_tokens(m) - layout.offsets[m]
        c, r, mask_gb, bb_s, ab_s = _batch_coefficients(xt_local, k, s, t, schedule, dtype)

        # true posterior via the same algebra with a one-hot x0
        w0 = np.eye(k, dtype=dtype)[x0_local] * r
        W0 = w0.sum(-1, keepdims=True)
        q = np.concatenate([c * (bb_s * W0 + ab_s * w0), mask_gb * W0], axis=-1)
        q = q / q.sum(-1, keepdims=True)
        live = q > 0
        neg_ent = np.where(live, q * np.log(np.where(live, q, 1.0)), 0.0).sum(-1)

        w = ag.exp(logp[m]) * r
        W = w.sum(-1, keepdims=True)
        seg = ag.mul(c, W * bb_s + w * ab_s)
        full = ag.concat([seg, W * mask_gb], axis=-1)
        norm = full.sum(-1, keepdims=True)
        logP = ag.log(full, LOG_FLOOR) - ag.log(norm, LOG_FLOOR)
        kl = ag.tsum(logP * (-q), axis=-1) + neg_ent
        if loss_mask is not None:
            kl = kl * np.asarray(loss_mask)[..., pos].astype(dtype)
        part = ag.tsum(kl, axis=-1)
        total = part if total is None else total + part
    return total


def _as_batch(seq: TokenSequence) -> TokenSequence:
    return seq if seq.indices.ndim == 2 else seq.replace(seq.indices[None])


def _cross_clean_logp(denoiser, x0_seq, xt_seq, t):
    """Modality m's prediction at t = 1 sees the other modalities clean."""
    pm = x0_seq.position_modality
    out = []
    for m in range(x0_seq.layout.num_modalities):
        clean_other = (t[:, None] == 1) & (pm[None, :] != m)
        x_in = np.where(clean_other, x0_seq.indices, xt_seq.indices)
        out.append(denoiser.forward(x_in, t)[m])
    return out


def vlb_estimate(x0_seq: TokenSequence, denoiser, schedule: NoiseSchedule, rng: np.random.Generator,
                 full: bool = False, cross_clean: bool = False, loss_mask=None, t=None) -> LossBreakdown:
    """Stochastic estimate of the bound for a batch of clean sequences.

    Default mode draws one level t ~ U{1..T} per sequence and x_t ~ q(x_t | x0),
    evaluating the matching term; ``T * total + lT`` is then unbiased for the
    full bound. ``full=True`` instead visits every t once (one x_t draw each)
    and reports the whole bound per sequence. ``loss`` holds the batch mean of
    the optimized terms as a differentiable tensor.
    """
    x0_seq = _as_batch(x0_seq)
    B = x0_seq.indices.shape[0]
    lT = lT_term(x0_seq, schedule)
    if x0_seq.num_positions == 0:
        z = np.zeros(B)
        return LossBreakdown(z, z, lT, z + lT, np.ones(B, dtype=np.int64), ag.const(0.0))
    if full:
        l0 = np.zeros(B)
        lt = np.zeros(B)
        loss = None
        for level in range(1, schedule.T + 1):
            sub = vlb_estimate(x0_seq, denoiser, schedule, rng, cross_clean=cross_clean,
                               loss_mask=loss_mask, t=np.full(B, level))
            l0 += sub.l0
            lt += sub.lt
            loss = sub.loss if loss is None else loss + sub.loss
        return LossBreakdown(l0, lt, lT, l0 + lt + lT, np.arange(1, schedule.T + 1), loss)
    t = rng.integers(1, schedule.T + 1, size=B) if t is None else np.asarray(t)
    xt_seq = sample_forward(t, x0_seq, schedule, rng)
    if cross_clean:
        logp = _cross_clean_logp(denoiser, x0_seq, xt_seq, t)
    else:
        logp = denoiser.forward(xt_seq.indices, t)
    term = term_tensor(logp, x0_seq, xt_seq, t, schedule, loss_mask)
    vals = term.data.astype(np.float64)
    l0 = np.where(t == 1, vals, 0.0)
    lt = np.where(t > 1, vals, 0.0)
    loss = ag.tsum(term) * (1.0 / B)
    return LossBreakdown(l0, lt, lT, vals, t, loss)


def exact_vlb(x0_seq: TokenSequence, denoiser, schedule: NoiseSchedule, max_configs: int = 4096) -> LossBreakdown:
    """The bound with every expectation over x_t taken exactly (tiny problems only).

    For each level, all jointly reachable corrupted sequences are enumerated
    and their differentiable terms weighted by q(x_t | x0).
    """
    x0_seq = _as_batch(x0_seq)
    if x0_seq.indices.shape[0] != 1:
        raise ValueError("exact_vlb takes a single clean sequence")
    layout = x0_seq.layout
    lT = lT_term(x0_seq, schedule)
    x0 = x0_seq.indices[0]
    l0 = lt = 0.0
    loss = None
    for t in range(1, schedule.T + 1):
        q = q_xt_given_x0(t, x0, schedule, layout)
        support = [np.flatnonzero(row > 0) for row in q]
        n = int(np.prod([s.size for s in support]))
        if n > max_configs:
            raise ValueError(f"{n} corrupted sequences at t={t} exceed max_configs={max_configs}")
        grids = np.meshgrid(*support, indexing="ij")
        xt = np.stack([g.reshape(-1) for g in grids], axis=-1)
        weight = np.prod(q[np.arange(x0.size), xt], axis=-1)
        xt_seq = x0_seq.replace(xt)
        x0_rep = x0_seq.replace(np.broadcast_to(x0, xt.shape))
        tt = np.full(n, t)
        term = term_tensor(denoiser.forward(xt, tt), x0_rep, xt_seq, tt, schedule)
        contrib = ag.tsum(term * weight.astype(term.data.dtype))
        value = float(contrib.data)
        if t == 1:
            l0 = value
        else:
            lt += value
        loss = contrib if loss is None else loss + contrib
    return LossBreakdown(np.array([l0]), np.array([lt]), lT, l0 + lt + lT, np.arange(1, schedule.T + 1), loss)
