import csv
import itertools
import math

import numpy as np
import pytest

from shiftaudit.dataset import EVENTS, FeatureSchema, MatchRecord, write_matches
from shiftaudit.models import MlpParams
from shiftaudit.models.mlp import init_mlp
from shiftaudit.models.tree import TreeParams, train_forest


def brute_shapley(f, x, Z):
    """Interventional Shapley values by averaging marginal contributions over
    every feature ordering. Independent of the library's coalition code."""
    p = len(x)

    def v(S):
        hyb = np.array(Z, dtype=np.float64, copy=True)
        idx = list(S)
        hyb[:, idx] = x[idx]
        return float(np.mean(f(hyb)))

    phi = np.zeros(p)
    perms = list(itertools.permutations(range(p)))
    for order in perms:
        S = []
        prev = v(S)
        for j in order:
            S.append(j)
            cur = v(S)
            phi[j] += cur - prev
            prev = cur
    return phi / math.factorial(p)


def random_forest(rng, p=5, n=60, n_trees=3, max_depth=4, used=None):
    """Small forest on random data; ``used`` restricts the features the
    target depends on (the others can still be split on by chance)."""
    X = rng.integers(0, 6, size=(n, p)).astype(np.float64)
    w = rng.normal(size=p)
    if used is not None:
        mask = np.zeros(p)
        mask[list(used)] = 1
        w = w * mask
    y = X @ w + 0.3 * rng.normal(size=n)
    params = TreeParams(max_depth=max_depth, min_samples_leaf=1, feature_subsample=None,
                        bootstrap=True, n_trees=n_trees)
    return train_forest((X, y), params, seed=int(rng.integers(1 << 30))), X


def random_mlp(rng, p=5, hidden=(6, 4), activation="tanh"):
    m = init_mlp(p, MlpParams(hidden=hidden, activation=activation), rng)
    for b in m.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    m.x_mean = rng.normal(size=p)
    m.x_scale = rng.uniform(0.5, 2.0, size=p)
    return m


def make_record(mid, home_feats, away_feats, hg, ag, domain="d"):
    return MatchRecord(mid, domain, tuple(home_feats) + (hg, ag), tuple(away_feats) + (ag, hg))


def write_rows(path, rows, columns=None, schema=None):
    schema = schema or FeatureSchema()
    columns = columns or (["match_id", "domain", "season"] + schema.columns())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(r)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def schema():
    return FeatureSchema()


@pytest.fixture
def small_records():
    rng = np.random.default_rng(7)
    out = []
    p = len(EVENTS) - 2
    for i in range(30):
        h = rng.integers(0, 9, p)
        a = rng.integers(0, 9, p)
        hg, ag = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        out.append(make_record(f"m{i:03d}", map(int, h), map(int, a), hg, ag))
    return out


@pytest.fixture
def match_csv(tmp_path, small_records):
    path = tmp_path / "matches.csv"
    write_matches(small_records, path)
    return path


TINY_CONFIG = """
seeds = [0, 1]
models = ["dt", "rf", "mlp"]
explain_models = ["rf", "mlp"]
background_size = 10
n_permutations = 6
output_dir = "out"
{extra}

[rf]
n_trees = 6
min_samples_leaf = 2
feature_subsample = "third"
bootstrap = true

[mlp]
hidden = [8]
max_epochs = 20
patience = 5

[[domains]]
name = "league_a"
role = "elite"
synth = {{ preset = "elite", seed = 1, n_matches = 60 }}

[[domains]]
name = "league_b"
role = "elite"
synth = {{ preset = "elite", seed = 2, n_matches = 60 }}

[[domains]]
name = "campus"
role = "target"
synth = {{ preset = "elite", seed = 3, n_matches = 12, shift = {{ permutation = "reversal" }} }}
"""


def tiny_config(tmp_path, extra="", name="tiny.toml"):
    path = tmp_path / name
    path.write_text(TINY_CONFIG.format(extra=extra))
    return path


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
