"""Corruption schedules.

A schedule stores cumulative retention ``alpha_bar[t]`` and cumulative
absorption ``gamma_bar[t]`` for ``t = 0..T``; per-step values follow from

    alpha[t] = alpha_bar[t] / alpha_bar[t-1]
    gamma[t] = (gamma_bar[t] - gamma_bar[t-1]) / (1 - gamma_bar[t-1])

The remaining per-source mass is spread uniformly over the source modality,
``beta = (1 - alpha - gamma) / K_m``, so beta depends on the layout and is
computed on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRangeError, ScheduleError
from .layout import ModalityLayout

_TOL = 1e-12


def _clip_unit(x, name):
    if x < -_TOL or x > 1 + _TOL:
        raise ScheduleError(f"{name}={x!r} outside [0, 1]")
    return min(max(x, 0.0), 1.0)


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    gamma_bar: np.ndarray
    alpha_floor: float = 0.0
    plan: str = "custom"

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        gb = np.array(self.gamma_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.shape != gb.shape or ab.size < 2:
            raise ScheduleError("alpha_bar and gamma_bar must be 1-D arrays of equal length T+1 >= 2")
        if ab[0] != 1.0 or gb[0] != 0.0:
            raise ScheduleError("schedule must start uncorrupted: alpha_bar[0]=1, gamma_bar[0]=0")
        if np.any(np.diff(ab) > _TOL) or np.any(np.diff(gb) < -_TOL):
            raise ScheduleError("alpha_bar must be non-increasing and gamma_bar non-decreasing")
        if np.any(ab + gb > 1 + _TOL) or ab.min() < 0 or gb.max() > 1 + _TOL:
            raise ScheduleError("need 0 <= alpha_bar, gamma_bar <= 1 and alpha_bar + gamma_bar <= 1")
        alpha = np.ones_like(ab)
        gamma = np.zeros_like(gb)
        for t in range(1, ab.size):
            prev = ab[t - 1]
            alpha[t] = _clip_unit(ab[t] / prev if prev > self.alpha_floor else 0.0, f"alpha[{t}]")
            left = 1.0 - gb[t - 1]
            gamma[t] = _clip_unit((gb[t] - gb[t - 1]) / left if left > 0 else 1.0, f"gamma[{t}]")
            if alpha[t] + gamma[t] > 1 + 1e-9:
                raise ScheduleError(f"alpha[{t}] + gamma[{t}] exceeds 1")
        for arr in (ab, gb, alpha, gamma):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "gamma_bar", gb)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma", gamma)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def check_t(self, t: int, lo: int = 0):
        if not lo <= t <= self.T:
            raise OutOfRangeError(f"t={t} outside [{lo}, {self.T}]")

    def between(self, s: int, t: int) -> tuple[float, float]:
        """Retention and absorption of the composite transition s -> t (s <= t)."""
        self.check_t(s)
        self.check_t(t)
        if s > t:
            raise OutOfRangeError(f"need s <= t, got s={s}, t={t}")
        if s == t:
            return 1.0, 0.0
        ab_s, ab_t = self.alpha_bar[s], self.alpha_bar[t]
        gb_s, gb_t = self.gamma_bar[s], self.gamma_bar[t]
        a = ab_t / ab_s if ab_s > self.alpha_floor else 0.0
        g = 1.0 - (1.0 - gb_t) / (1.0 - gb_s) if gb_s < 1.0 else 1.0
        return _clip_unit(a, "alpha"), _clip_unit(g, "gamma")

    def summary(self) -> dict:
        return {"plan": self.plan, "T": self.T, "alpha_floor": self.alpha_floor}


#: |1 - alpha - gamma| below this is rounding noise and snaps to 0
DUST = 1e-12


def beta_for(alpha: float, gamma: float, k: int) -> float:
    """Uniform within-modality mass per token; rounding noise snaps to 0."""
    rest = 1.0 - alpha - gamma
    if rest < -1e-9:
        raise ScheduleError(f"alpha + gamma = {alpha + gamma} exceeds 1")
    return 0.0 if rest < DUST else rest / k


def linear_schedule(T: int, alpha_floor: float = 1e-9) -> NoiseSchedule:
    """alpha_bar falls linearly 1 -> 0 while gamma_bar rises 0 -> 1 over T steps."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0 <= alpha_floor < 1.0 / T:
        raise ScheduleError(f"alpha_floor={alpha_floor} must lie in [0, 1/T)")
    t = np.arange(T + 1, dtype=np.float64)
    gamma_bar = t / T
    alpha_bar = np.maximum(1.0 - gamma_bar, alpha_floor)
    # gamma_bar[T] = 1 absorbs everything; a nonzero alpha_bar there would break mass balance
    alpha_bar[T] = 0.0
    return NoiseSchedule(alpha_bar, gamma_bar, alpha_floor=alpha_floor, plan="linear")


def make_schedule(plan: str, T: int, alpha_floor: float = 1e-9) -> NoiseSchedule:
    if plan != "linear":
        raise ScheduleError(f"unknown schedule plan {plan!r}; only 'linear' is supported")
    return linear_schedule(T, alpha_floor)


def step_params(schedule: NoiseSchedule, t: int, layout: ModalityLayout):
    """Per-step ``(alpha_t, gamma_t, (beta_t^(m) for each modality))`` for 1 <= t <= T."""
    schedule.check_t(t, lo=1)
    a, g = float(schedule.alpha[t]), float(schedule.gamma[t])
    return a, g, tuple(beta_for(a, g, k) for k in layout.sizes)


def cumulative_params(schedule: NoiseSchedule, t: int, layout: ModalityLayout):
    """Cumulative ``(alpha_bar_t, gamma_bar_t, (beta_bar_t^(m) ...))`` for 0 <= t <= T."""
    schedule.check_t(t)
    a, g = float(schedule.alpha_bar[t]), float(schedule.gamma_bar[t])
    return a, g, tuple(beta_for(a, g, k) for k in layout.sizes)
