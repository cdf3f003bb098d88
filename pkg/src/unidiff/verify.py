"""Production kernels checked against the brute-force oracles on small layouts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .kernel import dense_q, posterior, q_xt_given_x0, reverse_distribution, stationary_prior
from .layout import MASK, TokenSequence, modality_of, new_layout
from .objective import l0_term, lt_term
from .schedule import NoiseSchedule, linear_schedule

SMALL_LAYOUTS = ([2, 2], [3, 2], [3, 2, 4])


def curved_schedule(T: int) -> NoiseSchedule:
    """ᾱ = (1 - t/T)², γ̄ = t/T: leaves uniform within-segment mass, unlike the linear plan."""
    x = np.arange(T + 1) / T
    return NoiseSchedule((1 - x) ** 2, x, plan="curved")


def probe_schedules(T: int) -> list[NoiseSchedule]:
    return [linear_schedule(T), curved_schedule(T)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    value: float = 0.0


def kernel_closed_form(T: int = 16, tol: float = 1e-12) -> CheckResult:
    worst = 0.0
    for sizes in SMALL_LAYOUTS:
        layout = new_layout(sizes)
        for sch in probe_schedules(T):
            for t in range(T + 1):
                Qbar = oracle.dense_chain(t, sch, layout)
                closed = np.stack([q_xt_given_x0(t, j, sch, layout) for j in range(layout.total)], axis=1)
                worst = max(worst, float(np.abs(Qbar - closed).max()))
    return CheckResult("kernel closed form vs dense product", worst <= tol, f"max |err| = {worst:.2e}", worst)


def stochasticity(T: int = 16, tol: float = 1e-12) -> CheckResult:
    col_err = mask_err = 0.0
    for sizes in SMALL_LAYOUTS:
        layout = new_layout(sizes)
        for sch in probe_schedules(T):
            for t in range(1, T + 1):
                col_err = max(col_err, float(np.abs(dense_q(t, sch, layout).sum(0) - 1).max()))
                q = np.stack([q_xt_given_x0(t, j, sch, layout) for j in range(layout.total - 1)])
                mask_err = max(mask_err, float(np.abs(q[:, -1] - sch.gamma_bar[t]).max()))
    lin = linear_schedule(T)
    prior = stationary_prior(lin, new_layout(SMALL_LAYOUTS[-1]))
    point = np.zeros_like(prior)
    point[:, -1] = 1
    prior_err = float(np.abs(prior - point).max())
    worst = max(col_err, mask_err, prior_err)
    return CheckResult("column sums, mask mass, absorbing prior", worst <= tol,
                       f"col {col_err:.1e}, mask {mask_err:.1e}, prior {prior_err:.1e}", worst)


def zero_quadrants(T: int = 16) -> CheckResult:
    leaks = 0
    for sizes in SMALL_LAYOUTS:
        layout = new_layout(sizes)
        owner = layout.modality_table()
        for sch in probe_schedules(T):
            for t in range(1, T + 1):
                for Q in (dense_q(t, sch, layout), oracle.dense_chain(t, sch, layout)):
                    src, dst = owner[None, :], owner[:, None]
                    cross = (src != dst) & (src != MASK) & (dst != MASK)
                    leaks += int(np.count_nonzero(Q[cross]))
                    leaks += int(np.count_nonzero(Q[:-1, -1]))
    return CheckResult("no cross-modality transitions", leaks == 0, f"{leaks} nonzero forbidden entries", leaks)


def posterior_bayes(T: int = 16, tol: float = 1e-12) -> CheckResult:
    worst, n = 0.0, 0
    for sizes in SMALL_LAYOUTS:
        layout = new_layout(sizes)
        for sch in probe_schedules(T):
            chains = oracle._Chains(sch, layout, oracle.DEFAULT_BUDGET)
            for t in range(1, T + 1):
                Qbar = chains.between(0, t)
                for x0 in range(layout.total - 1):
                    for xt in np.flatnonzero(Qbar[:, x0] > 0):
                        ref = oracle.bayes_posterior(t, int(xt), x0, sch, layout, _chains=chains)
                        worst = max(worst, float(np.abs(posterior(t, int(xt), x0, sch, layout) - ref).max()))
                        n += 1
    return CheckResult("posterior vs Bayes enumeration", worst <= tol, f"{n} pairs, max |err| = {worst:.2e}", worst)


def reverse_mixture(T: int = 8, tol: float = 1e-12, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    layout = new_layout([3, 2, 4])
    for sch in probe_schedules(T):
        chains = oracle._Chains(sch, layout, oracle.DEFAULT_BUDGET)
        for t in range(1, T + 1):
            for s in range(t):
                for xt in range(layout.total):
                    m = modality_of(xt, layout)
                    mods = range(layout.num_modalities) if m == MASK else [m]
                    for mod in mods:
                        seg = layout.segment(mod)
                        if chains.between(0, t)[xt, seg.start:seg.stop].sum() <= 0:
                            continue
                        probs = np.zeros(layout.total)
                        probs[seg.start:seg.stop] = rng.dirichlet(np.ones(layout.sizes[mod]))
                        seq = TokenSequence(np.array([xt]), layout, [int(i == mod) for i in range(3)])
                        got = reverse_distribution(t, seq, probs[None], sch, s=s).dense()[0]
                        ref = oracle.mixture_reverse(t, xt, probs, sch, layout, s=s, _chains=chains)
                        worst = max(worst, float(np.abs(got - ref).max()))
    return CheckResult("strided x0-mixture reverse vs enumeration", worst <= tol, f"max |err| = {worst:.2e}", worst)


def objective_terms(T: int = 6, tol: float = 1e-10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    layout = new_layout([3, 2, 4])
    lengths = (2, 1, 2)
    pm = np.repeat(np.arange(3), lengths)
    worst = 0.0
    for sch in probe_schedules(T):
        chains = oracle._Chains(sch, layout, oracle.DEFAULT_BUDGET)
        for _ in range(20):
            x0 = np.array([layout.offsets[m] + rng.integers(layout.sizes[m]) for m in pm])
            t = int(rng.integers(1, T + 1))
            xt = np.array([rng.choice(layout.total, p=chains.between(0, t)[:, j]) for j in x0])
            preds = [rng.dirichlet(np.ones(k), size=lengths[m]) for m, k in enumerate(layout.sizes)]
            dense = np.zeros((pm.size, layout.total))
            for m in range(3):
                dense[pm == m, layout.offsets[m]:layout.offsets[m] + layout.sizes[m]] = preds[m]
            x0_seq = TokenSequence(x0, layout, lengths)
            xt_seq = TokenSequence(xt, layout, lengths)
            model = reverse_distribution(t, xt_seq, preds, sch)
            if t == 1:
                got = float(l0_term(x0_seq, xt_seq, preds, sch))
                ref = sum(oracle.nll_enum(x0[p], oracle.mixture_reverse(1, xt[p], dense[p], sch, layout, _chains=chains))
                          for p in range(pm.size))
            else:
                got = float(lt_term(t, x0_seq, xt_seq, model, sch))
                ref = sum(oracle.kl_enum(oracle.bayes_posterior(t, xt[p], x0[p], sch, layout, _chains=chains),
                                         oracle.mixture_reverse(t, xt[p], dense[p], sch, layout, _chains=chains))
                          for p in range(pm.size))
            worst = max(worst, abs(got - ref))
    return CheckResult("l0 / lt vs KL and NLL enumeration", worst <= tol, f"max |err| = {worst:.2e}", worst)


def gradient_check(model, loss_fn, per_tensor: int = 3, seed: int = 0, step: float = 1e-4):
    """Relative error of analytic vs central-difference gradients.

    Samples ``per_tensor`` coordinates of every parameter tensor; returns
    ``(coords, rel)``. The denominator is floored at 1e-8 so coordinates
    with vanishing gradient do not produce spurious ratios.
    """
    rng = np.random.default_rng(seed)
    analytic = model.backward(loss_fn())
    coords = [(name, int(i)) for name, p in model.params.items()
              for i in rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False)]
    numeric = oracle.finite_diff(model.params, lambda: loss_fn().data, coords, step=step)
    got = np.array([analytic[n].reshape(-1)[i] for n, i in coords])
    rel = np.abs(got - numeric) / np.maximum(np.maximum(np.abs(got), np.abs(numeric)), 1e-8)
    return coords, rel


def run_all(seed: int = 0) -> list[CheckResult]:
    return [kernel_closed_form(), stochasticity(), zero_quadrants(), posterior_bayes(),
            reverse_mixture(seed=seed), objective_terms(seed=seed)]
