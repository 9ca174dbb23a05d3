"""Spearman rank agreement across seeds, domains and explanation methods."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .attribution import ImportanceVector
from .cis import CisResult

SEED_STABILITY = "seed_stability"
DOMAIN_AGREEMENT = "domain_agreement"
METHOD_AGREEMENT = "method_agreement"

_TIE_EPS = 1e-12


@dataclass(frozen=True)
class RankVector:
    """Average ranks with rank 1 for the largest value."""

    ranks: np.ndarray
    method: str = ""
    seed: int | None = None
    domain: str = ""


def average_ranks(values) -> np.ndarray:
    """Ascending ranks starting at 1; tied values share their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_importance(values, method: str = "", seed: int | None = None, domain: str = "") -> RankVector:
    """Rank importance values in descending order (most important = 1)."""
    return RankVector(average_ranks(-np.asarray(values, dtype=np.float64)), method, seed, domain)


def _ranks_of(v) -> np.ndarray:
    if isinstance(v, RankVector):
        return np.asarray(v.ranks, dtype=np.float64)
    if isinstance(v, ImportanceVector):
        v = v.values
    elif isinstance(v, CisResult):
        v = v.normalized
    return rank_importance(v).ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    return float(np.dot(da, db) / math.sqrt(np.dot(da, da) * np.dot(db, db)))


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float
    n: int
    degenerate: bool = False

    def __iter__(self):
        yield self.rho
        yield self.p_value


def t_pvalue(rho: float, n: int) -> float:
    """Two-sided p-value from ``t = rho * sqrt((n-2)/(1-rho^2))`` on n-2 df."""
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def _perm_rhos(ra: np.ndarray, perms: np.ndarray) -> np.ndarray:
    da = ra - ra.mean()
    db = perms - perms.mean(axis=1, keepdims=True)
    return (db @ da) / np.sqrt(np.dot(da, da) * np.einsum("ij,ij->i", db, db))


def permutation_pvalue(ra: np.ndarray, rb: np.ndarray, n_resamples: int = 100_000,
                       seed: int = 0, chunk: int = 20_000) -> float:
    """Monte Carlo two-sided p-value: share of shuffles of ``rb`` whose
    ``|rho|`` reaches the observed one. Converges to :func:`exact_pvalue`."""
    observed = abs(_pearson(ra, rb)) - _TIE_EPS
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_resamples:
        m = min(chunk, n_resamples - done)
        perms = rng.permuted(np.broadcast_to(rb, (m, len(rb))), axis=1)
        hits += int(np.count_nonzero(np.abs(_perm_rhos(ra, perms)) >= observed))
        done += m
    return hits / n_resamples


def exact_pvalue(ra: np.ndarray, rb: np.ndarray) -> float:
    """Two-sided p-value over all ``n!`` orderings of ``rb``."""
    observed = abs(_pearson(ra, rb)) - _TIE_EPS
    perms = np.array(list(itertools.permutations(rb)), dtype=np.float64)
    return float(np.mean(np.abs(_perm_rhos(ra, perms)) >= observed))


def spearman(a, b, pvalue: str = "t", n_resamples: int = 100_000, seed: int = 0) -> SpearmanResult:
    """Spearman's rho as the Pearson correlation of average ranks.

    ``a`` and ``b`` may be raw importance values, :class:`ImportanceVector`,
    :class:`CisResult` (normalized scores are used) or :class:`RankVector`.
    ``pvalue`` selects ``"t"`` (t approximation), ``"permutation"`` (Monte
    Carlo, seeded) or ``"exact"`` (all orderings; small n only). When either
    ranking is constant rho is undefined and a degenerate NaN result is
    returned.
    """
    ra, rb = _ranks_of(a), _ranks_of(b)
    if len(ra) != len(rb):
        raise ValueError("rank vectors differ in length")
    n = len(ra)
    if n < 3:
        raise ValueError("spearman needs at least three items")
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        return SpearmanResult(math.nan, math.nan, n, degenerate=True)
    rho = max(-1.0, min(1.0, _pearson(ra, rb)))
    if pvalue == "t":
        p = t_pvalue(rho, n)
    elif pvalue == "permutation":
        p = permutation_pvalue(ra, rb, n_resamples, seed)
    elif pvalue == "exact":
        p = exact_pvalue(ra, rb)
    else:
        raise ValueError(f"unknown p-value method {pvalue!r}")
    return SpearmanResult(rho, p, n)


@dataclass
class AgreementReport:
    kind: str
    labels: list[tuple[str, str]] = field(default_factory=list)
    rhos: list[float] = field(default_factory=list)
    p_values: list[float] = field(default_factory=list)
    context: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rhos)) if self.rhos else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.rhos, ddof=1)) if len(self.rhos) > 1 else 0.0

    @property
    def median_p(self) -> float:
        return float(np.median(self.p_values)) if self.p_values else math.nan

    def rows(self) -> list[dict]:
        return [{"a": a, "b": b, "rho": r, "p_value": p}
                for (a, b), r, p in zip(self.labels, self.rhos, self.p_values)]


def _features(v):
    return getattr(v, "features", ()) or ()


def _check_compatible(vectors: Sequence) -> None:
    lengths = {len(_ranks_of(v)) for v in vectors}
    if len(lengths) != 1:
        raise ValueError("importance vectors have mismatched feature sets")
    names = {_features(v) for v in vectors if _features(v)}
    if len(names) > 1:
        raise ValueError("importance vectors have mismatched feature sets")


def seed_stability(importances: Sequence[ImportanceVector], pvalue: str = "t") -> AgreementReport:
    """All pairwise rho between per-seed importance vectors."""
    if len(importances) < 2:
        raise ValueError("seed stability needs at least two seeds")
    _check_compatible(importances)
    report = AgreementReport(SEED_STABILITY)
    for a, b in itertools.combinations(importances, 2):
        r = spearman(a, b, pvalue)
        report.labels.append((str(a.seed), str(b.seed)))
        report.rhos.append(r.rho)
        report.p_values.append(r.p_value)
    return report


@dataclass
class AgreementMatrix:
    labels: list[str]
    rho: np.ndarray
    p_value: np.ndarray


def domain_agreement(importances: Mapping[str, object], pvalue: str = "t") -> AgreementMatrix:
    """Symmetric matrix of rho between domains, unit diagonal."""
    labels = list(importances)
    if len(labels) < 2:
        raise ValueError("domain agreement needs at least two domains")
    vecs = [importances[k] for k in labels]
    _check_compatible(vecs)
    d = len(labels)
    rho = np.eye(d)
    pv = np.zeros((d, d))
    for i, j in itertools.combinations(range(d), 2):
        r = spearman(vecs[i], vecs[j], pvalue)
        rho[i, j] = rho[j, i] = r.rho
        pv[i, j] = pv[j, i] = r.p_value
    return AgreementMatrix(labels, rho, pv)


def method_agreement(shap_imps: Sequence[ImportanceVector], cis_results: Sequence[CisResult],
                     pvalue: str = "t") -> AgreementReport:
    """Per-seed rho between Shapley importance and normalized CIS."""
    if len(shap_imps) != len(cis_results) or not shap_imps:
        raise ValueError("need one CIS result per Shapley importance vector")
    report = AgreementReport(METHOD_AGREEMENT)
    for s, c in zip(shap_imps, cis_results):
        if len(s.values) != len(c.normalized):
            raise ValueError("importance vectors have mismatched feature sets")
        r = spearman(s, c, pvalue)
        report.labels.append((str(s.seed), str(s.seed)))
        report.rhos.append(r.rho)
        report.p_values.append(r.p_value)
    return report


def average_reports(reports: Sequence[AgreementReport], kind: str = METHOD_AGREEMENT) -> AgreementReport:
    """Average aligned per-seed rho values over several domains.

    The median p-value is taken over every (domain, seed) pair.
    """
    if not reports:
        raise ValueError("nothing to average")
    n = {len(r.rhos) for r in reports}
    if len(n) != 1:
        raise ValueError("reports have different numbers of seeds")
    rhos = np.mean([r.rhos for r in reports], axis=0)
    out = AgreementReport(kind, list(reports[0].labels), rhos.tolist())
    out.p_values = [p for r in reports for p in r.p_values]
    return out
