"""CART regression trees and random forests.

Trees are stored as flat node arrays. A node is a leaf when ``feature == -1``;
otherwise rows with ``x[feature] <= threshold`` go to ``left``.

Growth and prediction run in numba kernels that release the GIL, so forests
are fitted tree-by-tree on a thread pool. Each tree draws from its own
splitmix64 stream seeded by :class:`numpy.random.SeedSequence`, which makes
the fitted forest independent of the number of threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from ..dataset import TARGET, DomainDataset
from ..errors import ProtocolViolation

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _splitmix(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _grow(X, y, idx, max_depth, min_leaf, mtry, seed):
    n_rows = idx.shape[0]
    p = X.shape[1]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap, np.float64)
    cover = np.zeros(cap, np.int64)

    work = idx.copy()
    feats = np.arange(p)
    state = np.uint64(seed)

    # stack of (node, start, end, depth)
    stack = np.zeros((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_rows
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        n = end - start
        total = 0.0
        for i in range(start, end):
            total += y[work[i]]
        value[node] = total / n
        cover[node] = n
        if n < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        # partial Fisher-Yates: first mtry entries of feats are the candidates
        for k in range(mtry):
            state, r = _splitmix(state)
            j = k + np.int64(r % np.uint64(p - k))
            tmp = feats[k]
            feats[k] = feats[j]
            feats[j] = tmp

        parent_score = total * total / n
        best_score = parent_score + 1e-12 * (abs(parent_score) + 1.0)
        best_f = -1
        best_thr = 0.0
        rows = work[start:end]
        yv = np.empty(n, np.float64)
        for k in range(mtry):
            f = feats[k]
            xv = X[rows, f]
            order = np.argsort(xv, kind="mergesort")
            for i in range(n):
                yv[i] = y[rows[order[i]]]
            s_left = 0.0
            for i in range(n - min_leaf):
                s_left += yv[i]
                n_left = i + 1
                if n_left < min_leaf:
                    continue
                lo = xv[order[i]]
                hi = xv[order[i + 1]]
                if lo >= hi:
                    continue
                s_right = total - s_left
                score = s_left * s_left / n_left + s_right * s_right / (n - n_left)
                if score > best_score:
                    best_score = score
                    best_f = f
                    thr = 0.5 * (lo + hi)
                    if thr >= hi:
                        thr = lo
                    best_thr = thr
        if best_f < 0:
            continue

        # in-place partition of work[start:end]
        i = start
        j = end - 1
        while i <= j:
            if X[work[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = work[i]
                work[i] = work[j]
                work[j] = tmp
                j -= 1
        mid = i
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is numbered first
        stack[top, 0] = rnode
        stack[top, 1] = mid
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lnode
        stack[top, 1] = start
        stack[top, 2] = mid
        stack[top, 3] = depth + 1
        top += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], cover[:n_nodes])


@njit(cache=True, nogil=True)
def _predict_tree(feature, threshold, left, right, value, X):
    n = X.shape[0]
    out = np.empty(n, np.float64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_tree(self.feature, self.threshold, self.left, self.right, self.value, X)

    def used_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = {k: np.asarray(d[k], dtype=np.int64) for k in ("feature", "left", "right", "cover")}
        floats = {k: np.asarray(d[k], dtype=np.float64) for k in ("threshold", "value")}
        return cls(**ints, **floats)

    @classmethod
    def leaf(cls, value: float, cover: int = 1) -> "Tree":
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                   np.array([float(value)]), np.array([cover]))


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_samples_leaf: int = 1
    # None = all features; int = count; float = fraction; "third" = ceil(p/3)
    feature_subsample: int | float | str | None = None
    bootstrap: bool = False
    n_trees: int = 1


DT_DEFAULTS = TreeParams()
RF_DEFAULTS = TreeParams(n_trees=300, min_samples_leaf=2, feature_subsample="third", bootstrap=True)


def resolve_mtry(spec, p: int) -> int:
    if spec is None:
        return p
    if spec == "third":
        return max(1, math.ceil(p / 3))
    if spec == "sqrt":
        return max(1, math.ceil(math.sqrt(p)))
    if isinstance(spec, float):
        return min(p, max(1, math.ceil(spec * p)))
    return min(p, max(1, int(spec)))


@dataclass
class ForestModel:
    """Mean-of-trees regressor. A decision tree is a one-tree forest."""

    trees: list[Tree]
    params: TreeParams
    seed: int
    n_features: int
    kind: str = "rf"

    def predict(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        acc = np.zeros(X.shape[0])
        for tree in self.trees:
            acc += tree.predict(X)
        return acc / len(self.trees)

    def used_features(self) -> set[int]:
        out: set[int] = set()
        for t in self.trees:
            out |= t.used_features()
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "n_features": self.n_features,
            "params": asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], TreeParams(**d["params"]),
                   int(d["seed"]), int(d["n_features"]), d["kind"])


def _check_X(X, p: int) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"expected {p} feature columns, got shape {X.shape}")
    return X


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, DomainDataset):
        if data.role == TARGET:
            raise ProtocolViolation(f"target domains are inference-only ({data.label or data.tag})")
        X, y = data.features, data.y
    else:
        X, y = data
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training data is empty")
    if len(y) != len(X):
        raise ValueError("X and y lengths differ")
    return X, y


def fit_trees(X, y, params: TreeParams, seed: int, threads: int = 1) -> list[Tree]:
    n, p = X.shape
    mtry = resolve_mtry(params.feature_subsample, p)
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    min_leaf = max(1, int(params.min_samples_leaf))
    children = np.random.SeedSequence(seed).spawn(params.n_trees)

    def one(child: np.random.SeedSequence) -> Tree:
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
        stream = int(child.generate_state(1, np.uint64)[0])
        arrays = _grow(X, y, idx.astype(np.int64), max_depth, min_leaf, mtry, np.uint64(stream))
        return Tree(*arrays)

    if threads > 1 and params.n_trees > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, children))
    return [one(c) for c in children]


def train_tree(train, params: TreeParams | None = None, seed: int = 0, threads: int = 1) -> ForestModel:
    """Single CART regression tree grown by variance reduction."""
    params = params or DT_DEFAULTS
    if params.n_trees != 1:
        params = TreeParams(**{**asdict(params), "n_trees": 1})
    X, y = _xy(train)
    return ForestModel(fit_trees(X, y, params, seed), params, seed, X.shape[1], kind="dt")


def train_forest(train, params: TreeParams | None = None, seed: int = 0, threads: int = 1) -> ForestModel:
    """Bagged CART ensemble with per-split feature subsampling."""
    params = params or RF_DEFAULTS
    if params.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    X, y = _xy(train)
    return ForestModel(fit_trees(X, y, params, seed, threads), params, seed, X.shape[1], kind="rf")
