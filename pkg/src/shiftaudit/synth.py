"""Synthetic match-event domains with a planted importance hierarchy.

Counts for each feature are rounded Gamma draws with a given mean and
standard deviation (the continuous analogue of a negative binomial). A team's
goals are ``round(softplus(eta))`` with

    eta = intercept + sum_j c_j (x_j - mean_j) + sum_{(i,j)} c_ij z_i z_j + noise

where ``z`` are standardized counts. The two teams' counts of the same event
are tied by a Gaussian copula with correlation ``-coupling``: at 0 the sides
are independent, at 1 the away count is the antithetic quantile of the home
count, so the goal difference is a deterministic function of either team's
own counts. Marginals are unaffected by the coupling.

The planted importance of feature ``j`` is ``|c_j| * std_j``. A
:class:`ShiftSpec` permutes that hierarchy across features by rescaling the
per-feature spreads (the importances seen by a fixed model depend on the
input distribution, not on the domain's own outcome coefficients), damps the
outcome coefficients and inflates spreads and outcome noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import special, stats

from .dataset import FEATURES, MatchRecord
from .robustness import RankVector, rank_importance

# mean and spread per match, top-flight scale
ELITE_MEANS = (4.5, 5.0, 3.5, 380.0, 75.0, 8.0, 8.0, 2.0, 5.0,
               10.0, 6.0, 600.0, 3.5, 9.0, 18.0, 2.8, 11.0)
ELITE_STDS = (2.2, 2.5, 2.0, 110.0, 16.0, 3.5, 3.5, 1.5, 2.8,
              3.5, 2.5, 120.0, 2.0, 3.5, 7.0, 1.7, 3.2)
# planted importance order (0 = most important) and sign of each effect
ELITE_ORDER = (0, 4, 9, 1, 14, 5, 2, 15, 13, 3, 6, 11, 8, 16, 10, 12, 7)
ELITE_SIGNS = (1, 1, 1, 1, -1, 1, -1, -1, 1, 1, -1, 1, 1, 1, 1, 1, -1)


@dataclass(frozen=True)
class ShiftSpec:
    permutation: tuple[int, ...]
    damping: float = 1.0
    noise_inflation: float = 1.0

    def __post_init__(self):
        perm = tuple(int(i) for i in self.permutation)
        object.__setattr__(self, "permutation", perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError("permutation must be a permutation of 0..p-1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.noise_inflation <= 0:
            raise ValueError("noise inflation must be positive")

    @classmethod
    def identity(cls, p: int) -> "ShiftSpec":
        return cls(tuple(range(p)))


@dataclass(frozen=True)
class GeneratorSpec:
    means: tuple[float, ...]
    stds: tuple[float, ...]
    coefficients: tuple[float, ...]
    intercept: float = 1.2
    noise_std: float = 0.0
    coupling: float = 0.0
    interactions: tuple[tuple[int, int, float], ...] = ()
    feature_names: tuple[str, ...] = FEATURES
    domain: str = "synth"
    seed: int = 0

    def __post_init__(self):
        for name in ("means", "stds", "coefficients", "feature_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "interactions",
                           tuple((int(i), int(j), float(c)) for i, j, c in self.interactions))
        p = len(self.feature_names)
        if not (len(self.means) == len(self.stds) == len(self.coefficients) == p):
            raise ValueError("means, stds and coefficients must have one entry per feature")
        if any(m <= 0 for m in self.means) or any(s <= 0 for s in self.stds):
            raise ValueError("count means and stds must be positive")
        if self.noise_std < 0:
            raise ValueError("noise std must be nonnegative")
        if not 0 <= self.coupling <= 1:
            raise ValueError("coupling must lie in [0, 1]")
        for i, j, _ in self.interactions:
            if not (0 <= i < p and 0 <= j < p):
                raise ValueError("interaction index out of range")

    @property
    def p(self) -> int:
        return len(self.feature_names)

    @property
    def planted_importance(self) -> np.ndarray:
        return np.abs(np.asarray(self.coefficients)) * np.asarray(self.stds)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


def planted_ranking(spec: GeneratorSpec) -> RankVector:
    """Ground-truth ranking by ``|coefficient| * std``, most important first."""
    if spec.interactions:
        raise ValueError("planted ranking is only defined for specs without interactions")
    return rank_importance(spec.planted_importance, method="planted", domain=spec.domain)


def apply_shift(spec: GeneratorSpec, shift: ShiftSpec, domain: str | None = None,
                seed: int | None = None) -> GeneratorSpec:
    """Target-domain spec whose planted importance of feature ``j`` is the
    source importance of feature ``permutation[j]`` (scaled by damping and
    inflation)."""
    p = spec.p
    if len(shift.permutation) != p:
        raise ValueError("shift permutation length does not match the spec")
    q = spec.planted_importance
    stds = list(spec.stds)
    for j, src in enumerate(shift.permutation):
        if src == j:
            continue
        c = abs(spec.coefficients[j])
        if c == 0:
            raise ValueError(f"cannot move importance onto zero-coefficient feature {j}")
        stds[j] = q[src] / c
    infl = shift.noise_inflation
    return replace(
        spec,
        stds=tuple(s * infl for s in stds) if infl != 1 else tuple(stds),
        coefficients=tuple(c * shift.damping for c in spec.coefficients)
        if shift.damping != 1 else spec.coefficients,
        noise_std=spec.noise_std * infl,
        domain=spec.domain if domain is None else domain,
        seed=spec.seed if seed is None else seed,
    )


def _gamma_quantile(u: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    shape = (mean / std) ** 2
    scale = std * std / mean
    return np.rint(stats.gamma.ppf(u, shape, scale=scale)).astype(np.int64)


def softplus(x):
    return np.logaddexp(0.0, x)


def goal_index(spec: GeneratorSpec, counts: np.ndarray) -> np.ndarray:
    """Noise-free ``eta`` for an ``(n, p)`` array of one side's counts."""
    means = np.asarray(spec.means)
    eta = spec.intercept + (counts - means) @ np.asarray(spec.coefficients, dtype=np.float64)
    if spec.interactions:
        z = (counts - means) / np.asarray(spec.stds)
        for i, j, c in spec.interactions:
            eta = eta + c * z[:, i] * z[:, j]
    return eta


def goals_from_index(eta: np.ndarray) -> np.ndarray:
    return np.rint(softplus(eta)).astype(np.int64)


def generate_counts(spec: GeneratorSpec, n_matches: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    means = np.asarray(spec.means, dtype=np.float64)
    stds = np.asarray(spec.stds, dtype=np.float64)
    z_home = rng.standard_normal((n_matches, spec.p))
    z_free = rng.standard_normal((n_matches, spec.p))
    c = spec.coupling
    z_away = -c * z_home + np.sqrt(1.0 - c * c) * z_free
    # ndtr(-z) rather than 1 - ndtr(z) keeps the antithetic case exact in the tails
    home = _gamma_quantile(special.ndtr(z_home), means, stds)
    away = _gamma_quantile(special.ndtr(z_away), means, stds)
    return home, away


def generate_domain(spec: GeneratorSpec, n_matches: int, id_prefix: str | None = None) -> list[MatchRecord]:
    """Draw ``n_matches`` fixtures from ``spec``; deterministic in ``spec.seed``."""
    if n_matches < 1:
        raise ValueError("n_matches must be >= 1")
    rng = np.random.default_rng(spec.seed)
    home, away = generate_counts(spec, n_matches, rng)
    eta_h = goal_index(spec, home)
    eta_a = goal_index(spec, away)
    if spec.noise_std > 0:
        eta_h = eta_h + rng.normal(0.0, spec.noise_std, n_matches)
        eta_a = eta_a + rng.normal(0.0, spec.noise_std, n_matches)
    gh, ga = goals_from_index(eta_h), goals_from_index(eta_a)
    prefix = id_prefix or spec.domain
    return [
        MatchRecord(f"{prefix}-{i:05d}", spec.domain,
                    tuple(int(v) for v in home[i]) + (int(gh[i]), int(ga[i])),
                    tuple(int(v) for v in away[i]) + (int(ga[i]), int(gh[i])))
        for i in range(n_matches)
    ]


# --------------------------------------------------------------------------- presets


def hierarchy_coefficients(stds, order, signs, top: float = 0.9, ratio: float = 0.85,
                           spacing: str = "geometric") -> tuple[float, ...]:
    """Coefficients whose planted importances decay with rank.

    ``geometric`` gives ``top * ratio**rank``; ``linear`` steps evenly from
    ``top`` down to ``top * ratio`` at the last rank.
    """
    p = len(stds)
    coef = [0.0] * p
    for rank, j in enumerate(order):
        if spacing == "geometric":
            q = top * ratio**rank
        elif spacing == "linear":
            q = top * (1.0 - (1.0 - ratio) * rank / max(p - 1, 1))
        else:
            raise ValueError(f"unknown spacing {spacing!r}")
        coef[j] = signs[j] * q / stds[j]
    return tuple(coef)


def elite_spec(domain: str = "elite", seed: int = 0, noise_std: float = 0.5,
               coupling: float = 0.6, ratio: float = 0.2, spacing: str = "linear") -> GeneratorSpec:
    """Top-flight-like domain: partially coupled sides and outcome noise."""
    return GeneratorSpec(
        means=ELITE_MEANS, stds=ELITE_STDS,
        coefficients=hierarchy_coefficients(ELITE_STDS, ELITE_ORDER, ELITE_SIGNS, ratio=ratio,
                                            spacing=spacing),
        noise_std=noise_std, coupling=coupling, domain=domain, seed=seed,
    )


def linear_spec(domain: str = "elite", seed: int = 0, noise_std: float = 0.0,
                coupling: float = 1.0, ratio: float = 0.2, spacing: str = "linear",
                mean: float = 20.0, std: float = 5.0) -> GeneratorSpec:
    """Noise-free linear index on equally scaled features.

    Fully coupled sides make the goal difference a deterministic function of
    one team's counts, and a shared count scale leaves the hierarchy entirely
    in the coefficients.
    """
    p = len(FEATURES)
    stds = (float(std),) * p
    return GeneratorSpec(
        means=(float(mean),) * p, stds=stds,
        coefficients=hierarchy_coefficients(stds, ELITE_ORDER, ELITE_SIGNS, ratio=ratio,
                                            spacing=spacing),
        noise_std=noise_std, coupling=coupling, domain=domain, seed=seed,
    )


PRESETS = {"elite": elite_spec, "linear": linear_spec}


def reversal_shift(p: int, damping: float = 0.7, noise_inflation: float = 1.5,
                   source: GeneratorSpec | None = None) -> ShiftSpec:
    """Shift that hands the k-th most important slot to the k-th least
    important feature of ``source`` (or reverses indices without one)."""
    if source is None:
        return ShiftSpec(tuple(range(p - 1, -1, -1)), damping, noise_inflation)
    order = np.argsort(-source.planted_importance, kind="mergesort")
    perm = [0] * p
    for k, j in enumerate(order):
        perm[j] = int(order[p - 1 - k])
    return ShiftSpec(tuple(perm), damping, noise_inflation)
