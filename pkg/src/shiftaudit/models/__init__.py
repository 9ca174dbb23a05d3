"""Regression models, evaluation and JSON persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mlp import MlpModel, MlpParams, train_mlp
from .tree import (DT_DEFAULTS, RF_DEFAULTS, ForestModel, Tree, TreeParams,
                   train_forest, train_tree)

__all__ = [
    "AdditiveModel", "DT_DEFAULTS", "RF_DEFAULTS", "ForestModel", "MlpModel", "MlpParams", "Tree", "TreeParams",
    "EvalEntry", "EvalReport", "aggregate_eval", "evaluate", "load_model", "predict",
    "save_model", "train_forest", "train_mlp", "train_tree",
]

FORMAT = "shiftaudit-model"
VERSION = 1


def predict(model, X) -> np.ndarray:
    out = model.predict(X)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("model produced non-finite predictions")
    return out


@dataclass(frozen=True)
class EvalEntry:
    model: str
    seed: int
    mae: float
    rmse: float
    n: int


@dataclass
class EvalReport:
    model: str
    entries: list[EvalEntry] = field(default_factory=list)

    def _stat(self, name: str):
        vals = np.array([getattr(e, name) for e in self.entries])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), std

    @property
    def mae(self) -> tuple[float, float]:
        """(mean, sample std) over seeds."""
        return self._stat("mae")

    @property
    def rmse(self) -> tuple[float, float]:
        return self._stat("rmse")


def evaluate(model, test, seed: int | None = None) -> EvalEntry:
    X, y = test.features, test.y.astype(np.float64)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    resid = predict(model, X) - y
    mae = float(np.mean(np.abs(resid)))
    rmse = float(np.sqrt(np.mean(resid * resid)))
    return EvalEntry(model.kind, model.seed if seed is None else seed, mae, rmse, len(y))


def aggregate_eval(entries) -> EvalReport:
    entries = list(entries)
    if not entries:
        raise ValueError("no evaluation entries")
    kinds = {e.model for e in entries}
    if len(kinds) != 1:
        raise ValueError(f"entries mix models: {sorted(kinds)}")
    return EvalReport(kinds.pop(), entries)


def model_to_json(model) -> str:
    """Self-describing JSON. Floats are written as shortest round-trip
    decimals, so reloading reproduces predictions bit for bit."""
    doc = {"format": FORMAT, "version": VERSION, **model.to_dict()}
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str):
    doc = json.loads(text)
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise ValueError("not a shiftaudit model file (or unsupported version)")
    if doc["kind"] in ("dt", "rf"):
        return ForestModel.from_dict(doc)
    if doc["kind"] == "mlp":
        return MlpModel.from_dict(doc)
    raise ValueError(f"unknown model kind {doc['kind']!r}")


def save_model(model, path) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path):
    return model_from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class AdditiveModel:
    """``f(x) = intercept + x @ coefficients``; a reference model for oracles."""

    coefficients: np.ndarray
    intercept: float = 0.0
    seed: int = 0
    kind: str = "additive"

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)

    @property
    def n_features(self) -> int:
        return len(self.coefficients)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        # explicit sum keeps each row's result independent of the batch
        return self.intercept + (X * self.coefficients).sum(axis=1)
