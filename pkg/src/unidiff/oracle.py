"""Deliberately naive reference computations.

These share nothing with :mod:`unidiff.kernel` or :mod:`unidiff.objective`
beyond the layout/schedule containers: transition matrices are filled entry
by entry, cumulative kernels are explicit matrix products, posteriors come
from Bayes' rule over every value of x_{t-1}, and the variational bound is
summed over every level and every joint corrupted sequence. Budgets keep
them from being run on anything large.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import OracleBudgetError, ZeroEvidenceError
from .layout import ModalityLayout
from .schedule import NoiseSchedule

LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class OracleBudget:
    max_total: int = 64
    max_positions: int = 8
    max_T: int = 16
    mc_trials: int = 100_000

    def check(self, layout: ModalityLayout | None = None, positions: int = 0, T: int = 0):
        if layout is not None and layout.total > self.max_total:
            raise OracleBudgetError(f"vocabulary {layout.total} > budget {self.max_total}")
        if positions > self.max_positions:
            raise OracleBudgetError(f"{positions} positions > budget {self.max_positions}")
        if T > self.max_T:
            raise OracleBudgetError(f"T={T} > budget {self.max_T}")


DEFAULT_BUDGET = OracleBudget()


def _owner(i: int, layout: ModalityLayout) -> int:
    start = 0
    for m, k in enumerate(layout.sizes):
        if start <= i < start + k:
            return m
        start += k
    return -1


def dense_step(t: int, schedule: NoiseSchedule, layout: ModalityLayout) -> np.ndarray:
    """Q_t filled entry by entry from its block definition."""
    n = layout.total
    a, g = float(schedule.alpha[t]), float(schedule.gamma[t])
    Q = np.zeros((n, n))
    for j in range(n):
        mj = _owner(j, layout)
        if mj < 0:
            Q[n - 1, j] = 1.0
            continue
        rest = 1.0 - a - g
        beta = rest / layout.sizes[mj] if abs(rest) > 1e-12 else 0.0
        for i in range(n - 1):
            if _owner(i, layout) == mj:
                Q[i, j] = beta + (a if i == j else 0.0)
        Q[n - 1, j] = g
    return Q


def dense_between(s: int, t: int, schedule: NoiseSchedule, layout: ModalityLayout,
                  budget: OracleBudget = DEFAULT_BUDGET) -> np.ndarray:
    """Q_t Q_{t-1} ... Q_{s+1}: the law of x_t given x_s."""
    budget.check(layout, T=t)
    out = np.eye(layout.total)
    for tau in range(s + 1, t + 1):
        out = dense_step(tau, schedule, layout) @ out
    return out


def dense_chain(t: int, schedule: NoiseSchedule, layout: ModalityLayout,
                budget: OracleBudget = DEFAULT_BUDGET) -> np.ndarray:
    """Q̄_t = Q_t ... Q_1 by repeated multiplication."""
    return dense_between(0, t, schedule, layout, budget)


class _Chains:
    """Memoized dense products for one (schedule, layout) pair."""

    def __init__(self, schedule, layout, budget):
        self.schedule, self.layout, self.budget = schedule, layout, budget
        self.between = lru_cache(maxsize=None)(self._between)

    def _between(self, s, t):
        return dense_between(s, t, self.schedule, self.layout, self.budget)


def bayes_posterior(t: int, xt: int, x0: int, schedule: NoiseSchedule, layout: ModalityLayout,
                    s: int | None = None, budget: OracleBudget = DEFAULT_BUDGET, _chains=None) -> np.ndarray:
    """q(x_s | x_t, x0) by enumerating every value of x_s."""
    s = t - 1 if s is None else s
    ch = _chains or _Chains(schedule, layout, budget)
    fwd = ch.between(s, t)
    prior = ch.between(0, s)[:, x0]
    evidence = ch.between(0, t)[xt, x0]
    if evidence <= 0:
        raise ZeroEvidenceError(f"q(x_t={xt} | x0={x0}) = 0 at t={t}")
    post = np.array([fwd[xt, j] * prior[j] for j in range(layout.total)])
    return post / evidence


def mixture_reverse(t: int, xt: int, x0_probs: np.ndarray, schedule: NoiseSchedule, layout: ModalityLayout,
                    s: int | None = None, budget: OracleBudget = DEFAULT_BUDGET, _chains=None) -> np.ndarray:
    """sum over candidate x0 of q(x_s | x_t, x0) p(x0), O(total^2), renormalized.

    Candidates that cannot produce x_t are skipped.
    """
    ch = _chains or _Chains(schedule, layout, budget)
    s = t - 1 if s is None else s
    acc = np.zeros(layout.total)
    for cand in range(layout.total):
        if x0_probs[cand] <= 0 or ch.between(0, t)[xt, cand] <= 0:
            continue
        acc += x0_probs[cand] * bayes_posterior(t, xt, cand, schedule, layout, s, budget, ch)
    z = acc.sum()
    if z <= 0:
        raise ZeroEvidenceError("no reachable candidate carries probability")
    return acc / z


def kl_enum(q: np.ndarray, p: np.ndarray) -> float:
    total = 0.0
    for qi, pi in zip(q, p):
        if qi > 0:
            total += qi * (np.log(qi) - np.log(max(pi, LOG_FLOOR)))
    return float(total)


def nll_enum(true_index: int, p: np.ndarray) -> float:
    return float(-np.log(max(p[true_index], LOG_FLOOR)))


def prior_row(m: int, schedule: NoiseSchedule, layout: ModalityLayout) -> np.ndarray:
    T = schedule.T
    ab, gb = float(schedule.alpha_bar[T]), float(schedule.gamma_bar[T])
    row = np.zeros(layout.total)
    for i in range(layout.total - 1):
        if _owner(i, layout) == m:
            row[i] = (1.0 - ab - gb) / layout.sizes[m] + ab / layout.sizes[m]
    row[-1] = gb
    return row


def exhaustive_vlb(x0: np.ndarray, position_modality: np.ndarray, predict_dense, schedule: NoiseSchedule,
                   layout: ModalityLayout, budget: OracleBudget = DEFAULT_BUDGET) -> dict:
    """Exact bound for one clean sequence by enumerating every level and joint x_t.

    ``predict_dense(xt_batch, t)`` must return x0 probabilities over the full
    vocabulary with shape ``(N, L, total)``.
    """
    x0 = np.asarray(x0)
    L = x0.size
    budget.check(layout, positions=L, T=schedule.T)
    ch = _Chains(schedule, layout, budget)
    lT = sum(kl_enum(ch.between(0, schedule.T)[:, x0[p]], prior_row(position_modality[p], schedule, layout))
             for p in range(L))
    per_t = {}
    for t in range(1, schedule.T + 1):
        qbar = ch.between(0, t)
        supports = [[i for i in range(layout.total) if qbar[i, x0[p]] > 0] for p in range(L)]
        configs = list(itertools.product(*supports))
        xt_batch = np.array(configs, dtype=np.int64).reshape(len(configs), L)
        preds = predict_dense(xt_batch, np.full(len(configs), t))
        expect = 0.0
        for n, cfg in enumerate(configs):
            weight = np.prod([qbar[cfg[p], x0[p]] for p in range(L)])
            value = 0.0
            for p in range(L):
                model = mixture_reverse(t, cfg[p], preds[n, p], schedule, layout, _chains=ch)
                if t == 1:
                    value += nll_enum(x0[p], model)
                else:
                    value += kl_enum(bayes_posterior(t, cfg[p], x0[p], schedule, layout, _chains=ch), model)
            expect += weight * value
        per_t[t] = expect
    return {"lT": lT, "l0": per_t[1], "lt": sum(v for k, v in per_t.items() if k > 1),
            "per_t": per_t, "total": lT + sum(per_t.values())}


def finite_diff(params: dict, loss_fn, coords, step: float = 1e-4) -> np.ndarray:
    """Central differences of ``loss_fn()`` at ``coords = [(name, flat_index), ...]``."""
    out = np.empty(len(coords))
    for n, (name, idx) in enumerate(coords):
        arr = params[name].data.reshape(-1)
        keep = arr[idx]
        arr[idx] = keep + step
        up = float(loss_fn())
        arr[idx] = keep - step
        down = float(loss_fn())
        arr[idx] = keep
        out[n] = (up - down) / (2 * step)
    return out


def chance_rate_mc(world, trials: int, rng: np.random.Generator) -> tuple[float, float]:
    """Consistency rate of grids paired with captions of independent scenes.

    Returns ``(rate, standard_error)``.
    """
    from .world import consistency_check, sample_scene, render_scene, caption_scene

    hits = 0
    for _ in range(trials):
        grid = render_scene(sample_scene(world, rng), world, rng)
        caption = caption_scene(sample_scene(world, rng), world, rng)
        hits += consistency_check(grid, caption, world).consistent
    rate = hits / trials
    return rate, float(np.sqrt(max(rate * (1 - rate), 1e-12) / trials))


class ExactDenoiser:
    """The Bayes-optimal x0 predictor for a known finite data distribution.

    ``support`` lists clean fused sequences with probabilities ``weights``;
    ``predict`` returns each position's marginal p(x0 | x_t) by enumeration.
    """

    def __init__(self, support, weights, seq, schedule: NoiseSchedule, layout: ModalityLayout,
                 budget: OracleBudget = DEFAULT_BUDGET):
        self.support = np.asarray(support, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64) / np.sum(weights)
        self.seq, self.layout = seq, layout
        budget.check(layout, positions=self.support.shape[1], T=schedule.T)
        self._qbar = [dense_chain(t, schedule, layout, budget) for t in range(schedule.T + 1)]
        self._cache = {}

    def _marginals(self, row: tuple, t: int) -> list[np.ndarray]:
        key = (row, t)
        if key not in self._cache:
            qb = self._qbar[t]
            like = np.array([np.prod([qb[row[p], x0[p]] for p in range(len(row))]) for x0 in self.support])
            post = like * self.weights
            if post.sum() <= 0:
                raise ZeroEvidenceError("x_t impossible under the data distribution")
            post /= post.sum()
            pm = self.seq.position_modality
            outs = []
            for m, k in enumerate(self.layout.sizes):
                pos = np.flatnonzero(pm == m)
                acc = np.zeros((pos.size, k))
                for n, x0 in enumerate(self.support):
                    acc[np.arange(pos.size), x0[pos] - self.layout.offsets[m]] += post[n]
                outs.append(acc)
            self._cache[key] = outs
        return self._cache[key]

    def predict(self, xt: np.ndarray, t) -> list[np.ndarray]:
        xt = np.atleast_2d(xt)
        t = np.broadcast_to(np.asarray(t), xt.shape[:1])
        rows = [self._marginals(tuple(int(v) for v in xt[b]), int(t[b])) for b in range(xt.shape[0])]
        return [np.stack([r[m] for r in rows]) for m in range(self.layout.num_modalities)]
