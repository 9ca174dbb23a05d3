import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftaudit.dataset import DomainDataset, FeatureSchema, expand_split, split_matches
from shiftaudit.errors import ProtocolViolation, TrainingDiverged
from shiftaudit.models import (AdditiveModel, EvalEntry, ForestModel, MlpModel, MlpParams, Tree,
                               TreeParams, aggregate_eval, evaluate, load_model, predict,
                               save_model)
from shiftaudit.models import model_from_json, model_to_json
from shiftaudit.models.mlp import init_mlp, train_mlp
from shiftaudit.models.tree import resolve_mtry, train_forest, train_tree
from shiftaudit.synth import generate_domain, linear_spec

from conftest import random_forest, random_mlp

FULL = TreeParams()


def _ds(X, y, role="elite", split="train"):
    X = np.asarray(X)
    n = len(X)
    s = FeatureSchema(tuple(f"f{i}" for i in range(X.shape[1])))
    return DomainDataset(s, X, np.asarray(y), np.arange(n).astype(str), np.array(["home"] * n),
                         np.array(["d"] * n), "d", role, split)


# --------------------------------------------------------------------------- trees


def test_tree_perfect_split():
    m = train_tree((np.array([[1.0], [3.0]]), np.array([0.0, 4.0])))
    t = m.trees[0]
    assert t.n_nodes == 3 and t.feature[0] == 0
    assert np.array_equal(m.predict(np.array([[1.0], [3.0], [-5.0], [9.0]])), [0, 4, 0, 4])


def test_tree_constant_target_is_leaf(rng):
    X = rng.normal(size=(30, 4))
    m = train_tree((X, np.full(30, 2.5)))
    assert m.trees[0].n_nodes == 1
    assert np.all(m.predict(rng.normal(size=(5, 4))) == 2.5)


def test_tree_recovers_step_function(rng):
    def data(n):
        X = rng.integers(0, 20, size=(n, 5)).astype(float)
        return X, np.where(X[:, 2] > 9.5, 3.0, -1.0)

    m = train_tree(data(400), TreeParams(min_samples_leaf=1))
    Xt, yt = data(400)
    assert np.mean(np.abs(m.predict(Xt) - yt)) < 0.1


def test_tree_respects_depth_and_leaf_size(rng):
    X = rng.normal(size=(200, 3))
    y = rng.normal(size=200)
    m = train_tree((X, y), TreeParams(max_depth=3, min_samples_leaf=7))
    t = m.trees[0]

    def depth(node):
        if t.feature[node] < 0:
            return 0
        return 1 + max(depth(t.left[node]), depth(t.right[node]))

    assert depth(0) <= 3
    leaves = t.feature < 0
    assert t.cover[leaves].min() >= 7


def test_tree_cover_invariant(rng):
    forest, _ = random_forest(rng, n_trees=4)
    for t in forest.trees:
        split = np.nonzero(t.feature >= 0)[0]
        assert np.all(t.cover[split] == t.cover[t.left[split]] + t.cover[t.right[split]])
        assert t.cover.min() >= 1


def test_tree_piecewise_constant(rng):
    forest, X = random_forest(rng, n_trees=1, max_depth=3)
    t = forest.trees[0]
    unused = set(range(X.shape[1])) - t.used_features()
    x = X[:1].copy()
    base = forest.predict(x)
    for j in unused:
        x2 = x.copy()
        x2[0, j] += 1000.0
        assert forest.predict(x2)[0] == base[0]


def test_one_tree_forest_equals_tree(rng):
    X = rng.normal(size=(80, 4))
    y = X[:, 0] - 2 * X[:, 3] + rng.normal(size=80)
    dt = train_tree((X, y), FULL, seed=3)
    rf = train_forest((X, y), TreeParams(n_trees=1), seed=3)
    Xt = rng.normal(size=(50, 4))
    assert np.array_equal(dt.predict(Xt), rf.predict(Xt))


def test_forest_is_mean_of_trees(rng):
    forest, X = random_forest(rng, n_trees=7)
    per_tree = np.array([t.predict(X) for t in forest.trees])
    assert np.allclose(forest.predict(X), per_tree.mean(axis=0), rtol=0, atol=1e-12)


def test_forest_deterministic_across_threads(rng):
    X = rng.normal(size=(120, 6))
    y = X @ rng.normal(size=6)
    params = TreeParams(n_trees=12, min_samples_leaf=2, feature_subsample="third", bootstrap=True)
    a = train_forest((X, y), params, seed=11, threads=1)
    b = train_forest((X, y), params, seed=11, threads=4)
    c = train_forest((X, y), params, seed=12, threads=1)
    assert model_to_json(a) == model_to_json(b)
    assert model_to_json(a) != model_to_json(c)


@pytest.mark.parametrize("spec,p,expected", [
    (None, 17, 17), ("third", 17, 6), ("sqrt", 17, 5), (0.5, 17, 9), (4, 17, 4), (40, 17, 17),
])
def test_resolve_mtry(spec, p, expected):
    assert resolve_mtry(spec, p) == expected


def test_forest_beats_baseline_on_linear_synth():
    recs = generate_domain(linear_spec(seed=4), 1200)
    sd = expand_split(recs, split_matches(recs, seed=0))
    rf = train_forest(sd.train, TreeParams(n_trees=60, min_samples_leaf=2,
                                           feature_subsample="third", bootstrap=True), seed=0)
    base = np.mean(np.abs(sd.test.y - sd.train.y.mean()))
    assert evaluate(rf, sd.test).mae <= 0.7 * base


def test_training_rejects_target_rows():
    ds = _ds(np.ones((4, 2)), np.zeros(4), role="target")
    with pytest.raises(ProtocolViolation, match="inference-only"):
        train_forest(ds, TreeParams(n_trees=2))
    with pytest.raises(ProtocolViolation):
        train_mlp(ds, ds, MlpParams(max_epochs=1))


def test_empty_training_data():
    with pytest.raises(ValueError):
        train_tree((np.zeros((0, 3)), np.zeros(0)))


# --------------------------------------------------------------------------- mlp


def _num_grad(model, Z, y, tensors, i, idx, h=1e-6):
    t = tensors[i]
    old = t[idx]
    t[idx] = old + h
    lp = model.loss_and_grads(Z, y)[0]
    t[idx] = old - h
    lm = model.loss_and_grads(Z, y)[0]
    t[idx] = old
    return (lp - lm) / (2 * h)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_mlp_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(0 if activation == "tanh" else 1)
    m = random_mlp(rng, p=4, hidden=(5, 3), activation=activation)
    Z = rng.normal(size=(9, 4))
    y = rng.normal(size=9)
    _, gW, gb = m.loss_and_grads(Z, y)
    tensors = m.weights + m.biases
    grads = gW + gb
    for i, g in enumerate(grads):
        for idx in np.ndindex(g.shape):
            num = _num_grad(m, Z, y, tensors, i, idx)
            assert abs(num - g[idx]) <= 1e-4 * max(abs(num), abs(g[idx]), 1e-3)


def test_mlp_learns_zero_target(rng):
    X = rng.normal(size=(200, 3))
    train, val = (X[:160], np.zeros(160)), (X[160:], np.zeros(40))
    m = train_mlp(train, val, MlpParams(), seed=0)
    assert np.mean(np.abs(m.predict(val[0]))) < 0.05


def test_mlp_deterministic(rng):
    X = rng.normal(size=(120, 3))
    y = X[:, 0] * 2 - X[:, 1]
    params = MlpParams(hidden=(8, 4), max_epochs=15)
    a = train_mlp((X[:100], y[:100]), (X[100:], y[100:]), params, seed=5)
    b = train_mlp((X[:100], y[:100]), (X[100:], y[100:]), params, seed=5)
    c = train_mlp((X[:100], y[:100]), (X[100:], y[100:]), params, seed=6)
    assert model_to_json(a) == model_to_json(b)
    assert model_to_json(a) != model_to_json(c)


def test_mlp_restores_best_weights(rng):
    X = rng.normal(size=(150, 3))
    y = X @ np.array([1.0, -1.0, 0.5])
    tr, va = (X[:120], y[:120]), (X[120:], y[120:])
    m = train_mlp(tr, va, MlpParams(hidden=(6,), max_epochs=40, patience=5), seed=1)
    m_short = train_mlp(tr, va, MlpParams(hidden=(6,), max_epochs=1, patience=5), seed=1)
    mae = lambda mod: np.mean(np.abs(mod.predict(va[0]) - va[1]))
    assert mae(m) <= mae(m_short)


def test_mlp_divergence_names_epoch(rng):
    X = rng.normal(size=(40, 2))
    y = np.full(40, 1e200)
    with pytest.raises(TrainingDiverged, match="training diverged at epoch 0"):
        with np.errstate(all="ignore"):
            train_mlp((X, y), (X, y), MlpParams(hidden=(3,), max_epochs=3), seed=0)


def test_mlp_zero_weights_predict_bias(rng):
    m = init_mlp(3, MlpParams(hidden=(4,)), rng)
    for W in m.weights:
        W[:] = 0
    m.biases[-1][:] = 1.75
    assert np.all(m.predict(rng.normal(size=(6, 3))) == 1.75)


def test_mlp_layer_chaining():
    with pytest.raises(ValueError):
        MlpModel([np.zeros((3, 4)), np.zeros((5, 1))], [np.zeros(4), np.zeros(1)])
    with pytest.raises(ValueError):
        MlpModel([np.zeros((3, 2))], [np.zeros(2)])


# --------------------------------------------------------------------------- predict / eval


def test_single_leaf_forest():
    f = ForestModel([Tree.leaf(1.5)], TreeParams(), 0, 3)
    assert np.all(f.predict(np.zeros((4, 3))) == 1.5)


@pytest.mark.parametrize("kind", ["forest", "mlp"])
def test_batch_equals_single_rows(kind, rng):
    model = random_forest(rng, p=5)[0] if kind == "forest" else random_mlp(rng, p=5)
    X = rng.normal(size=(25, 5)) * 3
    batch = model.predict(X)
    single = np.array([model.predict(X[i])[0] for i in range(25)])
    assert np.array_equal(batch, single)


@pytest.mark.parametrize("kind", ["forest", "mlp"])
def test_dimension_mismatch(kind, rng):
    model = random_forest(rng, p=5)[0] if kind == "forest" else random_mlp(rng, p=5)
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 4)))


def test_predict_rejects_non_finite():
    m = AdditiveModel(np.array([1.0, 1.0]))
    with pytest.raises(FloatingPointError):
        predict(m, np.array([[np.inf, 0.0]]))


@pytest.mark.parametrize("resid,mae,rmse", [((0.0, 0.0), 0.0, 0.0), ((1.0, -1.0), 1.0, 1.0),
                                            ((0.0, 2.0), 1.0, np.sqrt(2))])
def test_evaluate_examples(resid, mae, rmse):
    y = np.array([3, 5])
    model = AdditiveModel(np.array([1.0]))
    ds = _ds(np.array([[3 + resid[0]], [5 + resid[1]]]), y, split="test")
    e = evaluate(model, ds)
    assert e.mae == pytest.approx(mae, abs=1e-15) and e.rmse == pytest.approx(rmse, abs=1e-15)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(AdditiveModel(np.array([1.0])), _ds(np.zeros((0, 1)), np.zeros(0)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_rmse_at_least_mae(resid):
    n = len(resid)
    ds = _ds(np.array(resid)[:, None], np.zeros(n, dtype=int), split="test")
    e = evaluate(AdditiveModel(np.array([1.0])), ds)
    assert e.rmse >= e.mae - 1e-12 >= -1e-12


def test_aggregate_eval():
    single = aggregate_eval([EvalEntry("rf", 0, 1.2, 1.5, 10)])
    assert single.mae == (1.2, 0.0) and single.rmse == (1.5, 0.0)
    rep = aggregate_eval([EvalEntry("rf", s, v, v + 1, 10) for s, v in enumerate([1.0, 2.0, 3.0])])
    assert rep.mae == (2.0, 1.0)
    with pytest.raises(ValueError):
        aggregate_eval([])
    with pytest.raises(ValueError):
        aggregate_eval([EvalEntry("rf", 0, 1, 1, 1), EvalEntry("dt", 0, 1, 1, 1)])


# --------------------------------------------------------------------------- persistence


@pytest.mark.parametrize("kind", ["forest", "mlp"])
def test_roundtrip_bit_exact(kind, rng, tmp_path):
    model = random_forest(rng, p=5)[0] if kind == "forest" else random_mlp(rng, p=5)
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    X = rng.normal(size=(40, 5)) * 4
    assert np.array_equal(model.predict(X), back.predict(X))
    assert model_to_json(back) == model_to_json(model)


def test_load_rejects_foreign_json():
    with pytest.raises(ValueError):
        model_from_json('{"format": "other", "version": 1}')
