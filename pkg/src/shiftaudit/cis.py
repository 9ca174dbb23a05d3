"""Counterfactual Impact Score.

Each feature is pushed, one at a time, toward a directional target built
from elite-training statistics (mean plus or minus one standard deviation,
downward for failure-type events and never below zero). The score is the
mean absolute change in prediction, normalized to sum to one across
features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DomainDataset, DomainStats, FeatureSchema
from .errors import ProtocolViolation


@dataclass(frozen=True)
class CisTargets:
    t: np.ndarray
    k: np.ndarray
    source: str


@dataclass
class CisResult:
    raw: np.ndarray
    normalized: np.ndarray
    domain: str = ""
    model: str = ""
    degenerate: bool = False


def build_targets(stats: DomainStats, schema: FeatureSchema) -> CisTargets:
    """``t_j = mu_j + k_j * sigma_j``, clamped at zero for decrease features.

    Only elite-training statistics are accepted.
    """
    if stats.source != "elite-train":
        raise ProtocolViolation(f"CIS targets need elite training statistics, got {stats.source}")
    k = np.asarray(schema.direction, dtype=np.float64)
    mu = np.asarray(stats.mu, dtype=np.float64)
    sigma = np.asarray(stats.sigma, dtype=np.float64)
    if mu.shape != k.shape or sigma.shape != k.shape:
        raise ValueError("statistics do not match the schema")
    t = mu + k * sigma
    t = np.where(k < 0, np.maximum(t, 0.0), t)
    return CisTargets(t, k, stats.source)


def counterfactual(x: np.ndarray, j: int, targets: CisTargets) -> np.ndarray:
    """Copy of ``x`` with feature ``j`` moved toward its target, never past it
    and never against its direction."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= j < x.shape[-1]:
        raise IndexError(f"feature index {j} out of range")
    out = x.copy()
    if targets.k[j] > 0:
        out[..., j] = np.maximum(x[..., j], targets.t[j])
    else:
        out[..., j] = np.minimum(x[..., j], targets.t[j])
    return out


def cis_scores(model, ds: DomainDataset | np.ndarray, targets: CisTargets,
               domain: str | None = None) -> CisResult:
    """Raw and normalized scores for every feature of ``ds``.

    When no counterfactual changes any prediction the normalized vector is
    all zeros and ``degenerate`` is set.
    """
    if isinstance(ds, DomainDataset):
        X, label = ds.features, ds.label
    else:
        X, label = np.asarray(ds, dtype=np.float64), ""
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("CIS needs a non-empty dataset")
    n, p = X.shape
    base = model.predict(X)
    cf = np.stack([counterfactual(X, j, targets) for j in range(p)])
    shifted = model.predict(cf.reshape(-1, p)).reshape(p, n)
    # fsum is correctly rounded, so the score does not depend on sample order
    raw = np.array([math.fsum(row) / n for row in np.abs(shifted - base[None, :])])
    total = raw.sum()
    if total > 0:
        normalized, degenerate = raw / total, False
    else:
        normalized, degenerate = np.zeros(p), True
    return CisResult(raw, normalized, label if domain is None else domain,
                     getattr(model, "kind", ""), degenerate)
