"""Fully connected regression network trained with Adam and early stopping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ..errors import TrainingDiverged
from .tree import _check_X, _xy


@dataclass(frozen=True)
class MlpParams:
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "relu"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z, a):
    return 1.0 - a * a


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass
class MlpModel:
    """Weights ``W[l]`` have shape ``(fan_in, fan_out)``; inputs are
    standardized with the stored training mean and scale before layer 0."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    seed: int = 0
    params: MlpParams = field(default_factory=MlpParams)
    kind: str = "mlp"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0]:
                raise ValueError(f"layer {l}: bias size does not match weights")
            if l and self.weights[l - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {l}: fan-in does not chain")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have one unit")
        p = self.n_features
        if self.x_mean is None:
            self.x_mean = np.zeros(p)
        if self.x_scale is None:
            self.x_scale = np.ones(p)

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def _forward(self, Z: np.ndarray):
        act = _ACTIVATIONS[self.activation][0]
        pre, post = [], [Z]
        a = Z
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            pre.append(z)
            a = z if l == last else act(z)
            post.append(a)
        return pre, post

    def predict(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        Z = (X - self.x_mean) / self.x_scale
        if len(Z) == 1:
            # BLAS takes a gemv path for one row, which rounds differently from gemm
            return self._forward(np.vstack([Z, Z]))[1][-1][:1, 0]
        return self._forward(Z)[1][-1][:, 0]

    def loss_and_grads(self, Z: np.ndarray, y: np.ndarray):
        """Mean squared error on standardized inputs ``Z`` and its gradients
        with respect to every weight and bias."""
        grad_act = _ACTIVATIONS[self.activation][1]
        pre, post = self._forward(Z)
        out = post[-1][:, 0]
        resid = out - y
        loss = float(np.mean(resid * resid))
        delta = (2.0 / len(y)) * resid[:, None]
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for l in range(len(self.weights) - 1, -1, -1):
            gW[l] = post[l].T @ delta
            gb[l] = delta.sum(axis=0)
            if l:
                delta = (delta @ self.weights[l].T) * grad_act(pre[l - 1], post[l])
        return loss, gW, gb

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "activation": self.activation,
            "params": asdict(self.params),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        params = dict(d["params"])
        params["hidden"] = tuple(params["hidden"])
        return cls(
            [np.asarray(W, dtype=np.float64).reshape(len(W), -1) for W in d["weights"]],
            [np.asarray(b, dtype=np.float64) for b in d["biases"]],
            d["activation"],
            np.asarray(d["x_mean"], dtype=np.float64),
            np.asarray(d["x_scale"], dtype=np.float64),
            int(d["seed"]),
            MlpParams(**params),
        )


def init_mlp(p: int, params: MlpParams, rng: np.random.Generator) -> MlpModel:
    sizes = [p, *params.hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        gain = 2.0 if params.activation == "relu" else 1.0
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, params.activation, params=params)


def train_mlp(train, val, params: MlpParams | None = None, seed: int = 0) -> MlpModel:
    """Minibatch Adam on squared error with early stopping on validation MAE.

    The weights with the best validation MAE are restored at the end.
    Raises :class:`TrainingDiverged` if the loss becomes non-finite.
    """
    params = params or MlpParams()
    X, y = _xy(train)
    Xv, yv = _xy(val)
    rng = np.random.default_rng(seed)
    model = init_mlp(X.shape[1], params, rng)
    model.seed = seed
    model.x_mean = X.mean(axis=0)
    scale = X.std(axis=0)
    model.x_scale = np.where(scale > 0, scale, 1.0)
    Z = (X - model.x_mean) / model.x_scale

    tensors = model.weights + model.biases
    m = [np.zeros_like(t) for t in tensors]
    v = [np.zeros_like(t) for t in tensors]
    b1, b2 = params.beta1, params.beta2
    step = 0
    best_mae = np.inf
    best = [t.copy() for t in tensors]
    stale = 0
    n = len(y)
    # single-threaded BLAS keeps summation order fixed; overflow shows up as a
    # non-finite loss and is reported as divergence
    with threadpool_limits(limits=1), np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(params.max_epochs):
            order = rng.permutation(n)
            for start in range(0, n, params.batch_size):
                batch = order[start:start + params.batch_size]
                loss, gW, gb = model.loss_and_grads(Z[batch], y[batch])
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"training diverged at epoch {epoch}")
                step += 1
                lr = params.learning_rate * np.sqrt(1 - b2**step) / (1 - b1**step)
                for i, g in enumerate(gW + gb):
                    m[i] *= b1
                    m[i] += (1 - b1) * g
                    v[i] *= b2
                    v[i] += (1 - b2) * g * g
                    tensors[i] -= lr * m[i] / (np.sqrt(v[i]) + params.eps)
            mae = float(np.mean(np.abs(model.predict(Xv) - yv)))
            if not np.isfinite(mae):
                raise TrainingDiverged(f"training diverged at epoch {epoch}")
            if mae < best_mae:
                best_mae = mae
                best = [t.copy() for t in tensors]
                stale = 0
            else:
                stale += 1
                if stale >= params.patience:
                    break
    k = len(model.weights)
    model.weights = best[:k]
    model.biases = best[k:]
    return model
