"""Interventional Shapley attributions against a fixed background sample.

For an input ``x`` and background rows ``z_1..z_B`` the value of a coalition
``S`` is the mean prediction over hybrids that take ``x`` on ``S`` and
``z_b`` elsewhere. Three routes compute the Shapley values of that game:

* :func:`shapley_exact` enumerates all ``2**p`` coalitions (the oracle),
* :func:`shapley_tree` walks each tree once per background row,
* :func:`shapley_sampled` averages marginal contributions over random
  feature orderings.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numba import njit

from .dataset import DomainDataset
from .errors import ProtocolViolation
from .models.tree import ForestModel

ENUMERATION_CAP = 20
# hybrids evaluated by shapley_exact before the caller must opt in
EXACT_BUDGET = 20_000_000


@dataclass(frozen=True)
class Background:
    data: np.ndarray
    seed: int
    source: str = "elite-train"

    def __post_init__(self):
        if self.data.ndim != 2 or len(self.data) < 1:
            raise ValueError("background needs at least one row")


@dataclass
class AttributionResult:
    phi: np.ndarray
    base: float
    method: str
    predictions: np.ndarray
    n_permutations: int | None = None
    seed: int | None = None

    @property
    def residual(self) -> np.ndarray:
        """Per-row efficiency gap ``f(x) - base - sum(phi)``."""
        return self.predictions - self.base - self.phi.sum(axis=1)


@dataclass(frozen=True)
class ImportanceVector:
    values: np.ndarray
    method: str = ""
    domain: str = ""
    seed: int | None = None
    features: tuple[str, ...] = ()

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("importance values must be nonnegative")

    def normalized(self) -> np.ndarray:
        total = self.values.sum()
        return self.values / total if total > 0 else np.zeros_like(self.values)


def draw_background(train: DomainDataset, size: int = 100, seed: int = 0) -> Background:
    """Sample up to ``size`` rows without replacement from elite training data."""
    if train.tag != "elite-train":
        raise ProtocolViolation(f"background must come from elite training data, got {train.tag}")
    if size < 1:
        raise ValueError("background size must be >= 1")
    n = len(train)
    idx = np.random.default_rng(seed).choice(n, size=min(size, n), replace=False)
    return Background(train.features[idx], seed, train.tag)


def _as_matrix(X, bg: Background) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != bg.data.shape[1]:
        raise ValueError("X and background have different feature counts")
    return X


def _base(model, bg: Background) -> float:
    return float(np.mean(model.predict(bg.data)))


# --------------------------------------------------------------------------- exact


def shapley_weights(p: int) -> np.ndarray:
    """``w[s] = s! (p-s-1)! / p!`` for coalition sizes ``s = 0..p-1``."""
    return np.array([float(Fraction(math.factorial(s) * math.factorial(p - s - 1), math.factorial(p)))
                     for s in range(p)])


def shapley_exact(model, X, bg: Background, cap: int = ENUMERATION_CAP,
                  allow_large: bool = False) -> AttributionResult:
    """Brute-force interventional Shapley values over every coalition."""
    X = _as_matrix(X, bg)
    n, p = X.shape
    if p > cap:
        raise ValueError(f"{p} features exceeds the enumeration cap of {cap}; use shapley_sampled")
    n_masks = 1 << p
    B = len(bg.data)
    if n * n_masks * B > EXACT_BUDGET and not allow_large:
        raise ValueError("exact enumeration is this large only with allow_large=True")

    masks = ((np.arange(n_masks)[:, None] >> np.arange(p)) & 1).astype(bool)
    sizes = masks.sum(axis=1)
    w = shapley_weights(p)
    phi = np.zeros((n, p))
    for i in range(n):
        hyb = np.where(masks[:, None, :], X[i], bg.data[None, :, :]).reshape(-1, p)
        v = model.predict(hyb).reshape(n_masks, B).mean(axis=1)
        for j in range(p):
            without = ~masks[:, j]
            S = np.nonzero(without)[0]
            phi[i, j] = np.sum(w[sizes[S]] * (v[S | (1 << j)] - v[S]))
    return AttributionResult(phi, _base(model, bg), "exact", model.predict(X))


# --------------------------------------------------------------------------- tree


def _pair_weights(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Shapley weights of the game ``v(S) = [A in S and B disjoint from S]``.

    ``wa[a, b]`` is the value credited to each member of A and ``wb[a, b]``
    the value debited from each member of B.
    """
    wa = np.zeros((p + 1, p + 1))
    wb = np.zeros((p + 1, p + 1))
    f = math.factorial
    for a in range(p + 1):
        for b in range(p + 1 - a):
            if a:
                wa[a, b] = float(Fraction(f(a - 1) * f(b), f(a + b)))
            if b:
                wb[a, b] = float(Fraction(f(a) * f(b - 1), f(a + b)))
    return wa, wb


@njit(cache=True, nogil=True)
def _tree_phi(feature, threshold, left, right, value, X, Z, wa, wb, out):
    n, p = X.shape
    n_nodes = feature.shape[0]
    st_node = np.empty(n_nodes + 1, np.int64)
    st_a = np.empty(n_nodes + 1, np.int64)
    st_b = np.empty(n_nodes + 1, np.int64)
    one = np.int64(1)
    for i in range(n):
        for k in range(Z.shape[0]):
            top = 0
            st_node[0] = 0
            st_a[0] = 0
            st_b[0] = 0
            top = 1
            while top > 0:
                top -= 1
                node = st_node[top]
                ma = st_a[top]
                mb = st_b[top]
                while feature[node] >= 0:
                    f = feature[node]
                    bit = one << f
                    x_left = X[i, f] <= threshold[node]
                    z_left = Z[k, f] <= threshold[node]
                    if ma & bit:
                        node = left[node] if x_left else right[node]
                    elif mb & bit:
                        node = left[node] if z_left else right[node]
                    elif x_left == z_left:
                        node = left[node] if x_left else right[node]
                    else:
                        # branch: z's side requires f outside the coalition
                        st_node[top] = left[node] if z_left else right[node]
                        st_a[top] = ma
                        st_b[top] = mb | bit
                        top += 1
                        node = left[node] if x_left else right[node]
                        ma = ma | bit
                if ma == 0 and mb == 0:
                    continue
                a = 0
                b = 0
                for j in range(p):
                    if ma & (one << j):
                        a += 1
                    elif mb & (one << j):
                        b += 1
                v = value[node]
                ca = v * wa[a, b]
                cb = v * wb[a, b]
                for j in range(p):
                    if ma & (one << j):
                        out[i, j] += ca
                    elif mb & (one << j):
                        out[i, j] -= cb


def tree_phi(tree, X: np.ndarray, Z: np.ndarray, weights=None) -> np.ndarray:
    """Background-summed Shapley contributions of one tree, shape ``(n, p)``."""
    p = X.shape[1]
    wa, wb = weights if weights is not None else _pair_weights(p)
    out = np.zeros(X.shape)
    _tree_phi(tree.feature, tree.threshold, tree.left, tree.right, tree.value,
              X, np.ascontiguousarray(Z, dtype=np.float64), wa, wb, out)
    return out


def shapley_tree(model, X, bg: Background, threads: int = 1, chunk: int = 64) -> AttributionResult:
    """Exact interventional Shapley values for a tree ensemble.

    Each (tree, input, background row) triple is one traversal that splits
    only where input and background row disagree; the leaf reached is then
    credited to the features that routed it from the input side and debited
    from those that routed it from the background side. Rows are processed
    independently, so results do not depend on ``threads``.
    """
    if not isinstance(model, ForestModel):
        raise TypeError("shapley_tree needs a tree ensemble")
    X = _as_matrix(X, bg)
    n, p = X.shape
    if p > 62:
        raise ValueError("shapley_tree supports at most 62 features")
    weights = _pair_weights(p)
    Z = np.ascontiguousarray(bg.data, dtype=np.float64)

    def run(rows: np.ndarray) -> np.ndarray:
        acc = np.zeros((len(rows), p))
        for tree in model.trees:
            acc += tree_phi(tree, X[rows], Z, weights)
        return acc

    blocks = [np.arange(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    phi = np.concatenate(parts) if parts else np.zeros((0, p))
    phi /= len(model.trees) * len(Z)
    return AttributionResult(phi, _base(model, bg), "tree_exact", model.predict(X))


# --------------------------------------------------------------------------- sampled


def shapley_sampled(model, X, bg: Background, n_permutations: int = 200, seed: int = 0,
                    redistribute: bool = False) -> AttributionResult:
    """Permutation-sampling estimate of the interventional Shapley values.

    Permutations come in antithetic pairs (an ordering and its reverse) that
    share one background row; the background rows for each input are visited
    cyclically from a random offset. Each ordering is uniform and each row
    is uniform marginally, so a single permutation is an unbiased estimate
    of the exact values. Each row of ``X`` gets its own draws.

    The per-row efficiency gap is left in :attr:`AttributionResult.residual`
    unless ``redistribute`` is set, in which case it is spread over the
    features in proportion to ``|phi|``.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    X = _as_matrix(X, bg)
    n, p = X.shape
    B = len(bg.data)
    rng = np.random.default_rng(seed)
    offset = rng.integers(0, B, size=n)
    phi = np.zeros((n, p))
    rows = np.arange(n)
    for k in range(n_permutations):
        if k % 2 == 0:
            perm = np.argsort(rng.random((n, p)), axis=1)
        else:
            perm = perm[:, ::-1]
        z = bg.data[(offset + k // 2) % B]
        hyb = np.empty((p + 1, n, p))
        hyb[0] = z
        for t in range(p):
            hyb[t + 1] = hyb[t]
            hyb[t + 1, rows, perm[:, t]] = X[rows, perm[:, t]]
        f = model.predict(hyb.reshape(-1, p)).reshape(p + 1, n)
        delta = np.diff(f, axis=0)
        for t in range(p):
            phi[rows, perm[:, t]] += delta[t]
    phi /= n_permutations
    res = AttributionResult(phi, _base(model, bg), "sampled", model.predict(X),
                            n_permutations=n_permutations, seed=seed)
    if redistribute:
        gap = res.residual
        mass = np.abs(phi).sum(axis=1)
        share = np.divide(np.abs(phi), mass[:, None], out=np.full_like(phi, 1.0 / p),
                          where=mass[:, None] > 0)
        res.phi = phi + share * gap[:, None]
    return res


def explain(model, X, bg: Background, n_permutations: int = 200, seed: int = 0,
            threads: int = 1) -> AttributionResult:
    """Default route: exact tree algorithm for forests, sampling otherwise."""
    if isinstance(model, ForestModel):
        return shapley_tree(model, X, bg, threads=threads)
    return shapley_sampled(model, X, bg, n_permutations=n_permutations, seed=seed)


def write_attributions(path, attr: AttributionResult, sample_ids, features, domain: str = "",
                       seed: int | None = None) -> None:
    """Long-format CSV with one row per (sample, feature)."""
    if len(sample_ids) != attr.phi.shape[0] or len(features) != attr.phi.shape[1]:
        raise ValueError("sample ids and feature names must match the attribution matrix")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "feature", "phi", "method", "seed", "domain"])
        for sid, row in zip(sample_ids, attr.phi):
            for f, v in zip(features, row):
                w.writerow([sid, f, repr(float(v)), attr.method, "" if seed is None else seed,
                            domain])


def global_importance(attr: AttributionResult, domain: str = "", seed: int | None = None,
                      features: tuple[str, ...] = ()) -> ImportanceVector:
    """Mean absolute attribution per feature."""
    if attr.phi.ndim != 2 or attr.phi.shape[0] == 0:
        raise ValueError("no attributions to aggregate")
    return ImportanceVector(np.mean(np.abs(attr.phi), axis=0), attr.method, domain, seed,
                            tuple(features))
