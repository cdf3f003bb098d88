"""Discrete diffusion over a fused multi-modality token vocabulary with a shared absorbing mask."""

from .errors import UnidiffError
from .kernel import (CategoricalField, posterior, q_xt_given_x0, reverse_distribution, sample_forward,
                     stationary_prior, transition_column)
from .layout import MASK, ModalityLayout, TokenSequence, indicator, modality_of, new_layout
from .objective import LossBreakdown, l0_term, lT_term, lt_term, vlb_estimate
from .sampler import KnownMask, SamplerConfig, generate, reverse_step, truncate
from .schedule import NoiseSchedule, linear_schedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "MASK", "CategoricalField", "KnownMask", "LossBreakdown", "ModalityLayout", "NoiseSchedule",
    "SamplerConfig", "TokenSequence", "UnidiffError", "generate", "indicator", "l0_term", "lT_term",
    "linear_schedule", "lt_term", "make_schedule", "modality_of", "new_layout", "posterior",
    "q_xt_given_x0", "reverse_distribution", "reverse_step", "sample_forward", "stationary_prior",
    "transition_column", "truncate", "vlb_estimate",
]
