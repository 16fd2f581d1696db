"""Conditional quantile regression with a two-layer ReLU network.

The network is trained on the pinball loss with plain mini-batch gradient
descent, so a fixed ``random_state`` gives bitwise-identical weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "TrainingError",
    "TrainConfig",
    "pinball_loss",
    "MLPQuantileRegressor",
    "ConstantQuantileRegressor",
    "train_quantile_regressor",
    "predict_tau",
]

FORMAT_VERSION = 1


class TrainingError(FloatingPointError):
    """Training diverged (non-finite loss)."""


def pinball_loss(prediction, target, level: float):
    """Pinball (quantile) loss; elementwise for array inputs."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if not (np.all(np.isfinite(prediction)) and np.all(np.isfinite(target))):
        raise ValueError("pinball_loss needs finite inputs")
    r = target - prediction
    loss = np.maximum(level * r, (level - 1.0) * r)
    return float(loss) if loss.ndim == 0 else loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-2
    hidden_dim: int = 64
    weight_init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0 or not self.weight_init_scale > 0:
            raise ValueError("learning_rate and weight_init_scale must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _forward(params, X):
    W1, b1, w2, b2 = params
    pre = X @ W1.T + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2 + b2, pre, hidden


def _loss_and_grad(params, X, y, level):
    """Mean pinball loss of the network and its gradient w.r.t. ``params``."""
    W1, b1, w2, b2 = params
    out, pre, hidden = _forward(params, X)
    r = y - out
    loss = np.mean(np.maximum(level * r, (level - 1.0) * r))
    # d loss / d out; subgradient 0 at r == 0
    g_out = np.where(r > 0, -level, np.where(r < 0, 1.0 - level, 0.0)) / len(y)
    g_w2 = hidden.T @ g_out
    g_b2 = g_out.sum()
    # ReLU subgradient at 0 is 0
    g_pre = np.outer(g_out, w2) * (pre > 0)
    g_W1 = g_pre.T @ X
    g_b1 = g_pre.sum(axis=0)
    return loss, (g_W1, g_b1, g_w2, g_b2)


class MLPQuantileRegressor(RegressorMixin, BaseEstimator):
    """Two-layer ReLU network fit to the ``level`` conditional quantile.

    Inputs are standardized and targets divided by their mean absolute
    value before training; both scalings are undone in :meth:`predict`.
    The output weights start at zero and the output bias at the empirical
    ``level`` quantile of the targets.

    Parameters
    ----------
    level : float, default=0.9
        Target quantile level in (0, 1).
    hidden_dim : int, default=64
    epochs : int, default=200
    batch_size : int, default=32
    learning_rate : float, default=1e-2
    weight_init_scale : float, default=1.0
        Hidden-layer weights start uniform in ``+-weight_init_scale / sqrt(fan_in)``.
    random_state : int, default=0
        Seeds both the initialization and the per-epoch shuffles.
    """

    def __init__(
        self,
        level: float = 0.9,
        hidden_dim: int = 64,
        epochs: int = 200,
        batch_size: int = 32,
        learning_rate: float = 1e-2,
        weight_init_scale: float = 1.0,
        random_state: int = 0,
    ):
        self.level = level
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_init_scale = weight_init_scale
        self.random_state = random_state

    def _init_params(self, rng, d):
        h = self.hidden_dim
        s1 = self.weight_init_scale / math.sqrt(d)
        W1 = rng.uniform(-s1, s1, size=(h, d))
        b1 = rng.uniform(-s1, s1, size=h)
        # zero output layer: the untrained network is the unconditional quantile
        return [W1, b1, np.zeros(h), 0.0]

    def fit(self, X, y):
        if not 0 < self.level < 1:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        n, d = X.shape
        self.n_features_in_ = d
        self.x_mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.x_scale_ = np.where(std > 0, std, 1.0)
        mean_abs = float(np.mean(np.abs(y)))
        self.y_scale_ = mean_abs if mean_abs > 0 else 1.0
        Xs = (X - self.x_mean_) / self.x_scale_
        ys = y / self.y_scale_

        rng = np.random.default_rng(self.random_state)
        params = self._init_params(rng, d)
        params[3] = float(np.quantile(ys, self.level))
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                _, grads = _loss_and_grad(params, Xs[idx], ys[idx], self.level)
                params = [p - self.learning_rate * g for p, g in zip(params, grads)]
            r = ys - _forward(params, Xs)[0]
            loss = float(np.mean(np.maximum(self.level * r, (self.level - 1.0) * r)))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            self.loss_curve_.append(loss)
        self.W1_, self.b1_, self.w2_, self.b2_ = params
        self.b2_ = float(self.b2_)
        return self

    def predict(self, X):
        check_is_fitted(self, "W1_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, regressor expects {self.n_features_in_}"
            )
        Xs = (X - self.x_mean_) / self.x_scale_
        out, _, _ = _forward((self.W1_, self.b1_, self.w2_, self.b2_), Xs)
        return out * self.y_scale_

    def predict_tau(self, X, tau_floor: float = 1e-3):
        return np.maximum(self.predict(X), tau_floor)

    def to_dict(self) -> dict:
        check_is_fitted(self, "W1_")
        return {
            "version": FORMAT_VERSION,
            "kind": "mlp",
            "level": self.level,
            "dims": [int(self.n_features_in_), int(self.hidden_dim), 1],
            "weights": [self.W1_.tolist(), self.w2_.tolist()],
            "biases": [self.b1_.tolist(), self.b2_],
            "input_shift": self.x_mean_.tolist(),
            "input_scale": self.x_scale_.tolist(),
            "output_scale": self.y_scale_,
            "params": self.get_params(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MLPQuantileRegressor":
        if payload.get("version") != FORMAT_VERSION or payload.get("kind") != "mlp":
            raise ValueError("unsupported regressor payload")
        model = cls(**payload["params"])
        d, h, _ = payload["dims"]
        model.n_features_in_ = d
        model.W1_ = np.asarray(payload["weights"][0], dtype=float).reshape(h, d)
        model.w2_ = np.asarray(payload["weights"][1], dtype=float)
        model.b1_ = np.asarray(payload["biases"][0], dtype=float)
        model.b2_ = float(payload["biases"][1])
        model.x_mean_ = np.asarray(payload["input_shift"], dtype=float)
        model.x_scale_ = np.asarray(payload["input_scale"], dtype=float)
        model.y_scale_ = float(payload["output_scale"])
        return model


class ConstantQuantileRegressor(RegressorMixin, BaseEstimator):
    """Predicts ``value`` everywhere. Fitting only records the input width."""

    def __init__(self, value: float = 1.0, level: float | None = None):
        self.value = value
        self.level = level

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        X = check_array(X, dtype=np.float64)
        return np.full(X.shape[0], float(self.value))

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "kind": "constant",
            "value": float(self.value),
            "level": self.level,
            "n_features_in": int(getattr(self, "n_features_in_", 0)),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ConstantQuantileRegressor":
        model = cls(value=payload["value"], level=payload.get("level"))
        model.n_features_in_ = payload["n_features_in"]
        return model


def regressor_from_dict(payload: dict):
    kinds = {"mlp": MLPQuantileRegressor, "constant": ConstantQuantileRegressor}
    try:
        return kinds[payload["kind"]].from_dict(payload)
    except KeyError:
        raise ValueError(f"unknown regressor kind {payload.get('kind')!r}") from None


def train_quantile_regressor(pairs, level: float, cfg: TrainConfig = TrainConfig()):
    """Fit an :class:`MLPQuantileRegressor` on ``(embedding, score)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty training set")
    X = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("regression targets must be finite")
    model = MLPQuantileRegressor(
        level=level,
        hidden_dim=cfg.hidden_dim,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        weight_init_scale=cfg.weight_init_scale,
        random_state=cfg.seed,
    )
    return model.fit(X, y)


def predict_tau(regressor, reduced_embedding, tau_floor: float = 1e-3):
    """Regressor output clamped below at ``tau_floor``; scalar for a single vector."""
    x = np.asarray(reduced_embedding, dtype=float)
    out = np.maximum(regressor.predict(np.atleast_2d(x)), tau_floor)
    return float(out[0]) if x.ndim == 1 else out
