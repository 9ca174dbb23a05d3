import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftaudit.attribution import ImportanceVector
from shiftaudit.cis import CisResult
from shiftaudit.robustness import (RankVector, average_ranks, average_reports, domain_agreement,
                                   exact_pvalue, method_agreement, permutation_pvalue,
                                   rank_importance, seed_stability, spearman)


def brute_rho(a, b):
    """Spearman rho from explicitly enumerated ranks (ties share the mean
    position), then the textbook Pearson formula."""
    def ranks(v):
        out = []
        for x in v:
            below = sum(1 for y in v if y < x)
            equal = sum(1 for y in v if y == x)
            out.append(below + (equal + 1) / 2)
        return out

    ra, rb = ranks(a), ranks(b)
    n = len(a)
    ma, mb = sum(ra) / n, sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


def imp(values, seed=0):
    return ImportanceVector(np.asarray(values, dtype=float), seed=seed)


def test_examples():
    assert spearman([1, 2, 3, 4], [1, 2, 3, 4]).rho == pytest.approx(1.0, abs=1e-15)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]).rho == pytest.approx(-1.0, abs=1e-15)
    assert spearman([1, 2, 3, 4], [1, 2, 4, 3]).rho == pytest.approx(0.8, abs=1e-12)


def test_average_ranks():
    assert list(average_ranks([3.0, 1.0, 3.0, 2.0])) == [3.5, 1.0, 3.5, 2.0]
    assert list(rank_importance([0.5, 0.1, 0.9]).ranks) == [2.0, 3.0, 1.0]
    r = average_ranks(np.zeros(5))
    assert list(r) == [3.0] * 5


def test_ties_against_brute_force(rng):
    for n in range(3, 8):
        for _ in range(20):
            a = rng.integers(0, 3, size=n).astype(float)
            b = rng.integers(0, 4, size=n).astype(float)
            res = spearman(a, b)
            if res.degenerate:
                assert len(set(a)) == 1 or len(set(b)) == 1
                continue
            assert res.rho == pytest.approx(brute_rho(-a, -b), abs=1e-12)


def test_degenerate_constant():
    res = spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert res.degenerate and math.isnan(res.rho) and math.isnan(res.p_value)


def test_input_errors():
    with pytest.raises(ValueError):
        spearman([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2])
    with pytest.raises(ValueError):
        spearman([1, 2, 3], [1, 2, 3], pvalue="bootstrap")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=3, max_size=20), st.data())
def test_symmetry_and_monotone_invariance(a, data):
    b = data.draw(st.lists(st.integers(-50, 50), min_size=len(a), max_size=len(a)))
    ab, ba = spearman(a, b), spearman(b, a)
    if ab.degenerate:
        assert ba.degenerate
        return
    assert ab.rho == ba.rho
    assert ab.p_value == ba.p_value
    moved = spearman(np.exp(np.asarray(a) / 10), 3 * np.asarray(b) + 7)
    assert moved.rho == ab.rho
    assert -1.0 <= ab.rho <= 1.0


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30))
def test_rank_sum(values):
    r = average_ranks(values)
    n = len(values)
    assert r.sum() == pytest.approx(n * (n + 1) / 2)
    assert r.min() >= 1 and r.max() <= n


def test_exact_pvalue_brute_force():
    # n = 4: |rho| >= 0.8 is reached by 2 * 4 = 8 of the 24 orderings
    a, b = [1, 2, 3, 4], [1, 2, 4, 3]
    count = 0
    for perm in itertools.permutations(b):
        if abs(brute_rho(a, perm)) >= 0.8 - 1e-12:
            count += 1
    assert spearman(a, b, pvalue="exact").p_value == pytest.approx(count / 24, abs=1e-15)
    assert count == 8


def test_mc_converges_to_exact(rng):
    for n in (5, 6, 7):
        a = rng.normal(size=n)
        b = a + rng.normal(scale=0.8, size=n)
        ra, rb = rank_importance(a).ranks, rank_importance(b).ranks
        exact = exact_pvalue(ra, rb)
        mc = permutation_pvalue(ra, rb, 200_000, seed=1)
        assert mc == pytest.approx(exact, abs=4 * math.sqrt(exact * (1 - exact) / 200_000) + 1e-9)


def test_t_vs_mc_n17():
    rng = np.random.default_rng(2024)
    diffs = []
    for _ in range(10):
        a = rng.normal(size=17)
        b = 0.4 * a + rng.normal(size=17)
        t = spearman(a, b).p_value
        mc = spearman(a, b, pvalue="permutation", n_resamples=100_000, seed=3).p_value
        diffs.append(abs(t - mc))
    assert max(diffs) < 0.02


def test_mc_deterministic():
    a, b = np.arange(10.0), np.array([3, 1, 2, 0, 5, 4, 9, 6, 8, 7.0])
    p1 = spearman(a, b, pvalue="permutation", n_resamples=5000, seed=7).p_value
    p2 = spearman(a, b, pvalue="permutation", n_resamples=5000, seed=7).p_value
    assert p1 == p2


def test_null_pvalues_mostly_large():
    rng = np.random.default_rng(5)
    ps = [spearman(rng.normal(size=17), rng.normal(size=17)).p_value for _ in range(400)]
    assert 0.02 < np.mean(np.array(ps) < 0.05) < 0.09


def test_rankvector_passthrough():
    rv = RankVector(np.array([1.0, 2.0, 3.0]))
    assert spearman(rv, [3.0, 2.0, 1.0]).rho == pytest.approx(1.0)


def test_seed_stability():
    vecs = [imp([0.5, 0.3, 0.2, 0.1], seed=s) for s in range(5)]
    rep = seed_stability(vecs)
    assert len(rep.rhos) == 10
    assert rep.mean == pytest.approx(1.0) and rep.std == 0.0
    assert rep.labels[0] == ("0", "1")
    with pytest.raises(ValueError):
        seed_stability(vecs[:1])
    with pytest.raises(ValueError):
        seed_stability([imp([1, 2, 3]), imp([1, 2, 3, 4])])


def test_seed_stability_mean_within_range(rng):
    vecs = [imp(rng.random(17), seed=s) for s in range(5)]
    rep = seed_stability(vecs)
    assert min(rep.rhos) <= rep.mean <= max(rep.rhos)


def test_domain_agreement_matrix(rng):
    d = {name: imp(rng.random(8)) for name in "abcd"}
    m = domain_agreement(d)
    assert np.array_equal(m.rho, m.rho.T)
    assert np.all(np.diag(m.rho) == 1.0)
    assert m.labels == list("abcd")
    with pytest.raises(ValueError):
        domain_agreement({"a": imp([1, 2, 3])})


def test_method_agreement_proportional(rng):
    shap = [imp(rng.random(6) + 0.01, seed=s) for s in range(3)]
    cis = [CisResult(s.values * 3, s.values / s.values.sum()) for s in shap]
    rep = method_agreement(shap, cis)
    assert np.allclose(rep.rhos, 1.0)
    with pytest.raises(ValueError):
        method_agreement(shap, cis[:2])


def test_average_reports():
    shap = [imp([3, 2, 1, 0.5], seed=s) for s in range(2)]
    same = method_agreement(shap, [CisResult(np.ones(4), np.array([3, 2, 1, 0.5]))] * 2)
    flip = method_agreement(shap, [CisResult(np.ones(4), np.array([0.5, 1, 2, 3]))] * 2)
    avg = average_reports([same, flip])
    assert avg.rhos == pytest.approx([0.0, 0.0])
    assert len(avg.p_values) == 4
