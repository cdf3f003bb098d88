"""Reverse-process generation with clamping, strides and truncation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, OutOfRangeError, SamplerIncompleteError
from .kernel import q_xt_given_x0, reverse_distribution
from .layout import ModalityLayout, TokenSequence, modality_of
from .schedule import NoiseSchedule

TASKS = ("pair", "t2i", "i2t", "infill")
DEFAULT_TRUNCATION = {"pair": 0.88, "t2i": 0.88, "i2t": 0.75, "infill": 0.88}


@dataclass(frozen=True)
class SamplerConfig:
    task: str = "pair"
    stride: int = 1
    truncation_rate: float | None = None   # None -> task default
    truncation_mode: str = "mass"          # "mass" (nucleus) or "count"
    clamp: str = "clean"                   # "clean" or "renoise"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0 < self.rate <= 1:
            raise ConfigError(f"truncation rate must lie in (0, 1], got {self.rate}")
        if self.truncation_mode not in ("mass", "count"):
            raise ConfigError(f"unknown truncation mode {self.truncation_mode!r}")
        if self.clamp not in ("clean", "renoise"):
            raise ConfigError(f"unknown clamp mode {self.clamp!r}")

    @property
    def rate(self) -> float:
        return DEFAULT_TRUNCATION[self.task] if self.truncation_rate is None else float(self.truncation_rate)

    def ladder(self, T: int) -> list[int]:
        """Levels visited from T down to 0; the last hop always lands on 0."""
        levels = list(range(T, 0, -self.stride))
        return levels + [0]

    def to_dict(self) -> dict:
        return asdict(self)


def truncate(dist: np.ndarray, rate: float, mode: str = "mass") -> np.ndarray:
    """Keep the head of each categorical over the last axis and renormalize.

    ``mode="mass"`` keeps the shortest probability-sorted prefix whose mass
    reaches ``rate``; ``mode="count"`` keeps the top ``ceil(rate * K)`` tokens.
    Ties are broken toward lower indices.
    """
    if not 0 < rate <= 1:
        raise ConfigError(f"truncation rate must lie in (0, 1], got {rate}")
    dist = np.asarray(dist, dtype=np.float64)
    if rate == 1 and mode == "mass":
        return dist / dist.sum(-1, keepdims=True)
    order = np.argsort(-dist, axis=-1, kind="stable")
    ranked = np.take_along_axis(dist, order, axis=-1)
    if mode == "mass":
        before = np.cumsum(ranked, axis=-1) - ranked
        keep_ranked = before < rate * ranked.sum(-1, keepdims=True)
    else:
        k = dist.shape[-1]
        keep_ranked = np.arange(k) < int(np.ceil(rate * k))
        keep_ranked = np.broadcast_to(keep_ranked, ranked.shape)
    keep = np.zeros(dist.shape, dtype=bool)
    np.put_along_axis(keep, order, keep_ranked, axis=-1)
    out = np.where(keep, dist, 0.0)
    return out / out.sum(-1, keepdims=True)


@dataclass(frozen=True)
class KnownMask:
    """Which positions are conditioning inputs, and their clean tokens."""

    known: np.ndarray    # bool, (L,) or (B, L)
    tokens: np.ndarray   # fused indices, same shape; ignored where not known

    def validate(self, layout: ModalityLayout, position_modality: np.ndarray) -> "KnownMask":
        known = np.asarray(self.known, dtype=bool)
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if known.shape != tokens.shape or known.shape[-1] != position_modality.size:
            raise ConfigError("known mask and tokens must both cover every position")
        if known.any():
            mods = modality_of(tokens[known], layout)
            want = np.broadcast_to(position_modality, known.shape)[known]
            if np.any(mods != want):
                raise OutOfRangeError("a known token lies outside its position's modality segment")
        return KnownMask(known, tokens)

    @classmethod
    def none(cls, length: int) -> "KnownMask":
        return cls(np.zeros(length, dtype=bool), np.zeros(length, dtype=np.int64))

    @classmethod
    def for_task(cls, task: str, position_modality: np.ndarray, source=None,
                 image_modality: int = 0, text_modality: int = 1, region=None) -> "KnownMask":
        """Preset patterns: t2i knows the text, i2t the image, infill keeps ``~region``."""
        pm = np.asarray(position_modality)
        if task == "pair":
            return cls.none(pm.size)
        if source is None:
            raise ConfigError(f"task {task!r} needs source tokens to condition on")
        source = np.asarray(source, dtype=np.int64)
        if task == "t2i":
            known = pm == text_modality
        elif task == "i2t":
            known = pm == image_modality
        elif task == "infill":
            if region is None:
                raise ConfigError("infill needs a region of positions to regenerate")
            known = ~np.asarray(region, dtype=bool)
        else:
            raise ConfigError(f"unknown task {task!r}")
        return cls(np.broadcast_to(known, source.shape).copy(), source)


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(-1), probs.shape[-1] - 1)


def reverse_step(t: int, s: int, xt: TokenSequence, denoiser, known: KnownMask, config: SamplerConfig,
                 schedule: NoiseSchedule, rng: np.random.Generator) -> TokenSequence:
    """One hop x_t -> x_s using the strided x0-mixture posterior."""
    layout = xt.layout
    x_in = xt.indices
    if config.clamp == "renoise" and known.known.any():
        noisy = _renoise(known.tokens, t, schedule, layout, rng)
        x_in = np.where(known.known, noisy, x_in)
    probs = [truncate(p, config.rate, config.truncation_mode)
             for p in denoiser.predict(x_in, np.full(x_in.shape[0], t))]
    # known positions are overwritten below; treat them as masked so a clean
    # token the truncated prediction rules out cannot stall the hop
    hidden = xt.replace(np.where(known.known, layout.mask_index, xt.indices))
    field = reverse_distribution(t, hidden, probs, schedule, s=s, on_zero="uniform")
    out = np.empty_like(xt.indices)
    for m, k in enumerate(layout.sizes):
        local = _sample_categorical(field.parts[m], rng)
        pos = field.positions(m)
        out[..., pos] = np.where(local == k, layout.mask_index, local + layout.offsets[m])
    out = np.where(known.known, known.tokens, out)
    return xt.replace(out)


def _renoise(tokens, t, schedule, layout, rng):
    q = q_xt_given_x0(t, tokens, schedule, layout)
    return _sample_categorical(q, rng)


def generate(config: SamplerConfig, denoiser, schedule: NoiseSchedule, layout: ModalityLayout,
             known: KnownMask | None = None, count: int = 1, rng: np.random.Generator | None = None,
             trace=None) -> TokenSequence:
    """Run the reverse ladder from an all-mask x_T to x_0 for ``count`` chains.

    ``denoiser`` needs ``seq`` (lengths / order / position_modality) and
    ``predict(xt, t)`` returning per-modality x0 probabilities. ``trace``, if
    given, is called with ``(t, sequence)`` after every hop.
    """
    seq = denoiser.seq
    pm = seq.position_modality
    rng = np.random.default_rng(config.seed) if rng is None else rng
    known = (known or KnownMask.none(pm.size)).validate(layout, pm)
    shape = (count, pm.size)
    kmask = np.broadcast_to(known.known, shape)
    ktok = np.broadcast_to(known.tokens, shape)
    known = KnownMask(kmask, ktok)
    x = np.where(kmask, ktok, layout.mask_index)
    xt = TokenSequence(x, layout, seq.lengths, seq.order)
    ladder = config.ladder(schedule.T)
    for t, s in zip(ladder[:-1], ladder[1:]):
        xt = reverse_step(t, s, xt, denoiser, known, config, schedule, rng)
        if trace is not None:
            trace(s, xt)
    if np.any(xt.indices == layout.mask_index):
        raise SamplerIncompleteError("mask tokens remain after the final reverse step")
    return xt


def with_task(config: SamplerConfig, task: str) -> SamplerConfig:
    return replace(config, task=task)
