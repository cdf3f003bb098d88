"""Exact forward-process kernels over the fused vocabulary.

Nothing here materializes a ``total x total`` matrix except :func:`dense_qbar`,
which exists for cross-checking small layouts. Every transition column has
only three distinct values (stay, within-segment, to-mask), so marginals,
posteriors and x0-parameterized reverse steps are all O(K_m) per position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidPredictionError, OracleBudgetError, ZeroEvidenceError
from .layout import MASK, ModalityLayout, TokenSequence, modality_of
from .schedule import NoiseSchedule, beta_for, cumulative_params, step_params

DENSE_BOUND = 64


@dataclass(frozen=True)
class SparseColumn:
    """One column of Q_t: the law of x_t given a single x_{t-1}."""

    stay: float
    within: float
    to_mask: float
    source_modality: int

    def dense(self, source: int, layout: ModalityLayout) -> np.ndarray:
        col = np.zeros(layout.total)
        if self.source_modality == MASK:
            col[layout.mask_index] = 1.0
            return col
        seg = layout.segment(self.source_modality)
        col[seg.start:seg.stop] = self.within
        col[source] = self.stay
        col[layout.mask_index] = self.to_mask
        return col


def transition_column(t: int, source_index: int, schedule: NoiseSchedule, layout: ModalityLayout) -> SparseColumn:
    a, g, betas = step_params(schedule, t, layout)
    m = modality_of(source_index, layout)
    if m == MASK:
        return SparseColumn(1.0, 0.0, 0.0, MASK)
    return SparseColumn(a + betas[m], betas[m], g, m)


def marginal_sparse(t: int, x0_index: int, schedule: NoiseSchedule, layout: ModalityLayout):
    """``(P(x_t = x0), P(x_t = other same-segment token), P(x_t = mask))``."""
    ab, gb, bb = cumulative_params(schedule, t, layout)
    m = modality_of(x0_index, layout)
    if m == MASK:
        return 0.0, 0.0, 1.0
    return ab + bb[m], bb[m], gb


def q_xt_given_x0(t: int, x0_index, schedule: NoiseSchedule, layout: ModalityLayout) -> np.ndarray:
    """Dense law of x_t given x_0, shape ``(*x0.shape, total)``."""
    ab, gb, bb = cumulative_params(schedule, t, layout)
    x0 = np.asarray(x0_index)
    owner = np.asarray(modality_of(x0, layout))
    table = layout.modality_table()
    out = np.zeros(x0.shape + (layout.total,))
    # beta_bar of the source modality, broadcast onto every token of that segment
    bb_arr = np.append(np.asarray(bb), 0.0)
    same_seg = (table == owner[..., None]) & (owner[..., None] != MASK)
    out += np.where(same_seg, bb_arr[owner][..., None], 0.0)
    onehot = np.arange(layout.total) == x0[..., None]
    out += np.where(onehot & (owner[..., None] != MASK), ab, 0.0)
    out[..., layout.mask_index] = np.where(owner == MASK, 1.0, gb)
    return out


def sample_forward(t: int, x0_seq: TokenSequence, schedule: NoiseSchedule, rng: np.random.Generator) -> TokenSequence:
    """Draw x_t ~ q(x_t | x_0) independently per position.

    Uses the decomposition keep (alpha_bar) / absorb (gamma_bar) / uniform
    redraw within the segment (K * beta_bar), which reproduces the closed form.
    """
    layout = x0_seq.layout
    x0 = x0_seq.indices
    t = np.asarray(t)
    if t.size and (t.min() < 0 or t.max() > schedule.T):
        schedule.check_t(int(t.min()) if t.min() < 0 else int(t.max()))
    # t may be one level for everything or one level per sequence in a batch
    t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    ab = schedule.alpha_bar[t]
    gb = schedule.gamma_bar[t]
    u = rng.random(x0.shape)
    owner = x0_seq.position_modality
    sizes = np.array(layout.sizes)[owner]
    offsets = np.array(layout.offsets)[owner]
    redraw = offsets + np.minimum(np.floor(rng.random(x0.shape) * sizes).astype(np.int64), sizes - 1)
    xt = np.where(u < ab, x0, np.where(u < ab + gb, layout.mask_index, redraw))
    xt = np.where(x0 == layout.mask_index, layout.mask_index, xt)
    return x0_seq.replace(xt)


def _levels(schedule: NoiseSchedule, s: int, t: int, k: int):
    a_ts, g_ts = schedule.between(s, t)
    b_ts = beta_for(a_ts, g_ts, k)
    ab_s = float(schedule.alpha_bar[s])
    gb_s = float(schedule.gamma_bar[s])
    ab_t = float(schedule.alpha_bar[t])
    gb_t = float(schedule.gamma_bar[t])
    return a_ts, g_ts, b_ts, ab_s, gb_s, beta_for(ab_s, gb_s, k), ab_t, gb_t, beta_for(ab_t, gb_t, k)


def reverse_coefficients(xt_local: np.ndarray, k: int, s: int, t: int, schedule: NoiseSchedule):
    """Per-position constants for the x0-mixture of posteriors on one segment.

    For a candidate clean token ``x0`` the unnormalized posterior over
    ``x_s = j`` in the segment is ``c[j] * r[x0] * (beta_bar_s + alpha_bar_s [j == x0])``
    and ``mask_coef * gamma_bar_s * r[x0]`` on the mask. ``r`` is ``1 / q(x_t | x0)``,
    zero where x_t is unreachable from ``x0``.

    Returns ``(c, r, mask_coef, bb_s, ab_s, gb_s)`` with ``c, r`` of shape
    ``(*xt_local.shape, k)``; local index ``k`` denotes the mask.
    """
    a_ts, g_ts, b_ts, ab_s, gb_s, bb_s, ab_t, gb_t, bb_t = _levels(schedule, s, t, k)
    is_mask = (xt_local == k)[..., None]
    hit = np.arange(k) == xt_local[..., None]
    evidence = np.where(is_mask, gb_t, bb_t + ab_t * hit)
    with np.errstate(divide="ignore"):
        r = np.where(evidence > 0, 1.0 / np.where(evidence > 0, evidence, 1.0), 0.0)
    c = np.where(is_mask, g_ts, b_ts + a_ts * hit)
    mask_coef = is_mask[..., 0].astype(np.float64)
    return c, r, mask_coef, bb_s, ab_s, gb_s


def segment_reverse(x0_probs: np.ndarray, xt_local: np.ndarray, k: int, s: int, t: int,
                    schedule: NoiseSchedule, on_zero: str = "raise") -> np.ndarray:
    """``p(x_s | x_t) ∝ sum_x0 q(x_s | x_t, x0) p(x0)`` over one modality segment.

    ``x0_probs`` has shape ``(..., k)``; the result has shape ``(..., k + 1)``
    with the mask in the last column. Candidates x0 that cannot produce x_t
    carry no weight. ``on_zero`` controls positions where no candidate with
    positive probability is reachable: ``"raise"`` or ``"uniform"`` (fall back
    to a uniform x0 prediction, or leave x_t in place if even that fails).
    """
    c, r, mask_coef, bb_s, ab_s, gb_s = reverse_coefficients(xt_local, k, s, t, schedule)
    w = x0_probs * r
    total_w = w.sum(-1, keepdims=True)
    seg = c * (bb_s * total_w + ab_s * w)
    mask = mask_coef * gb_s * total_w[..., 0]
    out = np.concatenate([seg, mask[..., None]], axis=-1)
    norm = out.sum(-1, keepdims=True)
    dead = norm[..., 0] <= 0
    if dead.any():
        if on_zero == "stay":
            # not even a uniform x0 reaches x_t: leave the token where it is
            stay = (np.arange(k + 1) == xt_local[..., None]).astype(np.float64)
            out = np.where(dead[..., None], stay, out)
            norm = np.where(dead[..., None], 1.0, norm)
            return out / norm
        if on_zero == "raise":
            raise ZeroEvidenceError("x_t is unreachable from every candidate x0 with positive probability")
        uniform = segment_reverse(np.full(x0_probs.shape, 1.0 / k), xt_local, k, s, t, schedule, on_zero="stay")
        out = np.where(dead[..., None], uniform, out)
        norm = np.where(dead[..., None], 1.0, norm)
    return out / norm


def posterior(t: int, xt_index: int, x0_index: int, schedule: NoiseSchedule, layout: ModalityLayout,
              s: int | None = None) -> np.ndarray:
    """q(x_s | x_t, x_0) over the full vocabulary; ``s`` defaults to ``t - 1``."""
    s = t - 1 if s is None else s
    schedule.check_t(t, lo=1)
    m0 = modality_of(x0_index, layout)
    mt = modality_of(xt_index, layout)
    out = np.zeros(layout.total)
    if m0 == MASK:
        if mt != MASK:
            raise ZeroEvidenceError("x0 is the mask but x_t is not")
        out[layout.mask_index] = 1.0
        return out
    if mt not in (m0, MASK):
        raise ZeroEvidenceError("x_t lies in a different modality than x0")
    k, off = layout.sizes[m0], layout.offsets[m0]
    xt_local = np.array(k if mt == MASK else xt_index - off)
    onehot = np.zeros(k)
    onehot[x0_index - off] = 1.0
    seg = segment_reverse(onehot, xt_local, k, s, t, schedule)
    out[off:off + k] = seg[:k]
    out[layout.mask_index] = seg[k]
    return out


class CategoricalField:
    """Per-position distributions stored per modality segment.

    ``parts[m]`` has shape ``(..., L_m, K_m + 1)``: the segment of modality m
    followed by the mask probability. Positions follow ``positions[m]`` in the
    fused sequence.
    """

    def __init__(self, parts: Sequence[np.ndarray], layout: ModalityLayout, position_modality: np.ndarray):
        self.parts = [np.asarray(p, dtype=np.float64) for p in parts]
        self.layout = layout
        self.position_modality = np.asarray(position_modality)

    @classmethod
    def from_segments(cls, seg_probs: Sequence[np.ndarray], layout, position_modality):
        """Wrap mask-free per-segment probabilities (e.g. denoiser x0 predictions)."""
        parts = [np.concatenate([p, np.zeros(p.shape[:-1] + (1,))], axis=-1) for p in seg_probs]
        return cls(parts, layout, position_modality)

    @classmethod
    def from_dense(cls, probs: np.ndarray, layout: ModalityLayout, position_modality: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        parts = []
        for m in range(layout.num_modalities):
            pos = np.flatnonzero(position_modality == m)
            seg = layout.segment(m)
            block = probs[..., pos, :]
            foreign = block.sum(-1) - block[..., seg.start:seg.stop].sum(-1) - block[..., layout.mask_index]
            if np.any(np.abs(foreign) > 1e-12):
                raise InvalidPredictionError(f"mass outside segment of modality {m}")
            parts.append(np.concatenate([block[..., seg.start:seg.stop], block[..., -1:]], axis=-1))
        return cls(parts, layout, position_modality)

    def positions(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.position_modality == m)

    def dense(self) -> np.ndarray:
        lead = self.parts[0].shape[:-2]
        out = np.zeros(lead + (self.position_modality.size, self.layout.total))
        for m, part in enumerate(self.parts):
            seg = self.layout.segment(m)
            pos = self.positions(m)
            block = np.zeros(lead + (pos.size, self.layout.total))
            block[..., seg.start:seg.stop] = part[..., :-1]
            block[..., -1] = part[..., -1]
            out[..., pos, :] = block
        return out

    def segment_probs(self, m: int) -> np.ndarray:
        return self.parts[m][..., :-1]


def _as_x0_field(x0_probs, layout, position_modality) -> CategoricalField:
    if isinstance(x0_probs, CategoricalField):
        field = x0_probs
    elif isinstance(x0_probs, (list, tuple)):
        field = CategoricalField.from_segments(x0_probs, layout, position_modality)
    else:
        field = CategoricalField.from_dense(x0_probs, layout, position_modality)
    for m, part in enumerate(field.parts):
        if np.any(part[..., -1] != 0):
            raise InvalidPredictionError("x0 prediction puts mass on the mask token")
        if np.any(part < 0):
            raise InvalidPredictionError("negative probability in x0 prediction")
    return field


def local_tokens(xt_seq: TokenSequence, m: int) -> np.ndarray:
    """Segment-local codes of modality m's positions; the mask maps to ``K_m``."""
    layout = xt_seq.layout
    tok = xt_seq.segment_tokens(m)
    return np.where(tok == layout.mask_index, layout.sizes[m], tok - layout.offsets[m])


def reverse_distribution(t: int, xt_seq: TokenSequence, x0_probs, schedule: NoiseSchedule,
                         layout: ModalityLayout | None = None, s: int | None = None,
                         on_zero: str = "raise") -> CategoricalField:
    """x0-parameterized reverse step p(x_s | x_t), ``s`` defaulting to ``t - 1``.

    ``x0_probs`` may be a :class:`CategoricalField`, a list of per-modality
    segment arrays ``(..., L_m, K_m)``, or a dense ``(..., L, total)`` array.
    Each modality's positions use that modality's posterior; the results are
    kept positionally aligned with the fused sequence.
    """
    layout = xt_seq.layout if layout is None else layout
    s = t - 1 if s is None else s
    schedule.check_t(t, lo=1)
    field = _as_x0_field(x0_probs, layout, xt_seq.position_modality)
    parts = []
    for m, k in enumerate(layout.sizes):
        probs = field.segment_probs(m)
        parts.append(segment_reverse(probs, local_tokens(xt_seq, m), k, s, t, schedule, on_zero=on_zero))
    return CategoricalField(parts, layout, xt_seq.position_modality)


def dense_q(t: int, schedule: NoiseSchedule, layout: ModalityLayout) -> np.ndarray:
    """Dense Q_t with ``Q[i, j] = q(x_t = i | x_{t-1} = j)``."""
    return np.stack([transition_column(t, j, schedule, layout).dense(j, layout)
                     for j in range(layout.total)], axis=1)


def dense_qbar(t: int, schedule: NoiseSchedule, layout: ModalityLayout, bound: int = DENSE_BOUND) -> np.ndarray:
    """Q_t ... Q_1 by explicit multiplication; for small layouts only."""
    if layout.total > bound:
        raise OracleBudgetError(f"total={layout.total} exceeds dense bound {bound}")
    schedule.check_t(t)
    out = np.eye(layout.total)
    for tau in range(1, t + 1):
        out = dense_q(tau, schedule, layout) @ out
    return out


def stationary_prior(schedule: NoiseSchedule, layout: ModalityLayout) -> np.ndarray:
    """Prior p(x_T) for a position of each modality, shape ``(M, total)``.

    Row m puts ``beta_bar_T^(m)`` on each token of segment m and ``gamma_bar_T``
    on the mask. Any residual ``alpha_bar_T`` (zero for the linear plan) is
    spread evenly over the segment so every row is a distribution.
    """
    ab, gb, bb = cumulative_params(schedule, schedule.T, layout)
    out = np.zeros((layout.num_modalities, layout.total))
    for m, k in enumerate(layout.sizes):
        seg = layout.segment(m)
        out[m, seg.start:seg.stop] = bb[m] + ab / k
        out[m, layout.mask_index] = gb
    return out
