import numpy as np
import pytest

from unidiff.denoiser import SequenceSpec
from unidiff.errors import OracleBudgetError, ZeroEvidenceError
from unidiff.layout import new_layout
from unidiff.oracle import (OracleBudget, ExactDenoiser, bayes_posterior, mixture_reverse, dense_chain, dense_step, finite_diff,
                            kl_enum, nll_enum)
from unidiff.sampler import SamplerConfig, generate
from unidiff.schedule import linear_schedule

from conftest import curved

LAY = new_layout([2, 2])


def test_budget_limits():
    with pytest.raises(OracleBudgetError, match="vocabulary"):
        dense_chain(1, linear_schedule(4), new_layout([40, 30]))
    with pytest.raises(OracleBudgetError, match="T="):
        dense_chain(17, linear_schedule(20), LAY)
    with pytest.raises(OracleBudgetError, match="positions"):
        OracleBudget().check(positions=9)
    dense_chain(17, linear_schedule(20), LAY, budget=OracleBudget(max_T=20))


def test_dense_step_by_hand():
    # linear T=4, t=2: alpha = 0.5/0.75, gamma = 1 - 0.5/0.75, no uniform part
    a, g = 2 / 3, 1 / 3
    want = np.array([[a, 0, 0, 0, 0],
                     [0, a, 0, 0, 0],
                     [0, 0, a, 0, 0],
                     [0, 0, 0, a, 0],
                     [g, g, g, g, 1]])
    np.testing.assert_allclose(dense_step(2, linear_schedule(4), LAY), want, atol=1e-15)


def test_chain_is_stochastic_and_starts_at_identity():
    sch = curved(6)
    np.testing.assert_array_equal(dense_chain(0, sch, LAY), np.eye(5))
    for t in range(1, 7):
        np.testing.assert_allclose(dense_chain(t, sch, new_layout([3, 2, 4])).sum(0), 1, atol=1e-12)


def test_bayes_posterior_normalized_and_guarded():
    sch = curved(6)
    post = bayes_posterior(3, 4, 1, sch, LAY)
    assert post.sum() == pytest.approx(1) and post.min() >= 0
    with pytest.raises(ZeroEvidenceError):
        bayes_posterior(6, 0, 1, sch, LAY)  # nothing but the mask survives to T


def test_divergences():
    p = np.array([0.2, 0.5, 0.3])
    assert kl_enum(p, p) == 0
    assert kl_enum(p, np.array([0.2, 0.8, 0.0])) > 15  # floored, finite
    assert nll_enum(1, p) == pytest.approx(-np.log(0.5))


def test_finite_diff_on_quadratic():
    class P:
        data = np.array([1.0, -2.0, 3.0])

    params = {"x": P()}
    g = finite_diff(params, lambda: (params["x"].data ** 2).sum(), [("x", 0), ("x", 2)])
    np.testing.assert_allclose(g, [2.0, 6.0], atol=1e-8)
    np.testing.assert_array_equal(params["x"].data, [1.0, -2.0, 3.0])


SUPPORT = [[0, 2], [1, 3], [0, 3], [1, 2]]
WEIGHTS = [0.4, 0.3, 0.2, 0.1]


def exact(T=8):
    return ExactDenoiser(SUPPORT, WEIGHTS, SequenceSpec((1, 1)), linear_schedule(T), LAY)


def test_exact_denoiser_limits():
    den = exact()
    clean = den.predict(np.array([[1, 3]]), 0)
    assert clean[0][0, 0].tolist() == [0, 1] and clean[1][0, 0].tolist() == [0, 1]
    prior = den.predict(np.array([[4, 4]]), 8)
    np.testing.assert_allclose(prior[0][0, 0], [0.6, 0.4])
    np.testing.assert_allclose(prior[1][0, 0], [0.5, 0.5])
    # seeing the caption token sharpens the grid marginal: p(x0_a | x0_b = 3) = (0.2, 0.3) / 0.5
    np.testing.assert_allclose(den.predict(np.array([[4, 3]]), 4)[0][0, 0], [0.4, 0.6])


def exact_chain_law(den, T):
    """Output law of the factorized reverse chain, propagated over all joint states."""
    sch = linear_schedule(T)
    law = {(4, 4): 1.0}
    for t in range(T, 0, -1):
        nxt = {}
        for state, w in law.items():
            preds = den.predict(np.array([state]), t)
            dense = [np.zeros(5), np.zeros(5)]
            dense[0][0:2], dense[1][2:4] = preds[0][0, 0], preds[1][0, 0]
            rev = [mixture_reverse(t, state[p], dense[p], sch, LAY) for p in range(2)]
            for a in np.flatnonzero(rev[0]):
                for b in np.flatnonzero(rev[1]):
                    key = (int(a), int(b))
                    nxt[key] = nxt.get(key, 0.0) + w * rev[0][a] * rev[1][b]
        law = nxt
    return np.array([law.get(k, 0.0) for k in [(0, 2), (0, 3), (1, 2), (1, 3)]])


def test_exact_chain_law_matches_sampler():
    law = exact_chain_law(exact(8), 8)
    assert law.sum() == pytest.approx(1)
    n = 10_000
    out = generate(SamplerConfig(truncation_rate=1.0, seed=4), exact(), linear_schedule(8), LAY, count=n)
    freq = np.bincount(out.indices[:, 0] * 2 + out.indices[:, 1] - 2, minlength=4) / n
    assert np.all(np.abs(freq - law) < 3 * np.sqrt(law * (1 - law) / n) + 1e-12), (freq, law)


def test_factorization_error_shrinks_with_more_steps():
    data = np.array([0.4, 0.2, 0.1, 0.3])
    tv = [0.5 * np.abs(exact_chain_law(exact(T), T) - data).sum() for T in (2, 8, 16)]
    assert tv[0] > tv[1] > tv[2]
