"""PCA reduction of prompt embeddings."""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = ["PCAReducer", "fit_pca", "transform_pca"]

FORMAT_VERSION = 1


class PCAReducer(TransformerMixin, BaseEstimator):
    """Project embeddings onto the leading eigenvectors of their covariance.

    Parameters
    ----------
    n_components : int, default=32
        Number of principal directions kept.

    Attributes
    ----------
    mean_ : ndarray of shape (n_features,)
    components_ : ndarray of shape (n_components, n_features)
        Orthonormal rows ordered by descending eigenvalue. Each row is signed
        so that its largest-magnitude entry is positive.
    explained_variance_ : ndarray of shape (n_components,)
    n_features_in_ : int
    """

    def __init__(self, n_components: int = 32):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        n, d = X.shape
        if not 1 <= self.n_components <= d:
            raise ValueError(f"n_components={self.n_components} must lie in [1, {d}]")
        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        cov = centered.T @ centered / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][: self.n_components]
        components = eigvecs[:, order].T
        pivots = np.argmax(np.abs(components), axis=1)
        signs = np.sign(components[np.arange(len(order)), pivots])
        signs[signs == 0] = 1.0
        self.components_ = components * signs[:, None]
        self.explained_variance_ = np.clip(eigvals[order], 0.0, None)
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, PCAReducer expects {self.n_features_in_}"
            )
        Z = (X - self.mean_) @ self.components_.T
        return Z[0] if single else Z

    @property
    def output_dim(self) -> int:
        return self.components_.shape[0]

    def to_dict(self) -> dict:
        check_is_fitted(self, "components_")
        return {
            "version": FORMAT_VERSION,
            "input_dim": int(self.n_features_in_),
            "output_dim": int(self.output_dim),
            "mean": self.mean_.tolist(),
            "components": self.components_.tolist(),
            "explained_variance": self.explained_variance_.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PCAReducer":
        if payload.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported PCA model version {payload.get('version')!r}")
        model = cls(n_components=int(payload["output_dim"]))
        model.mean_ = np.asarray(payload["mean"], dtype=float)
        model.components_ = np.asarray(payload["components"], dtype=float).reshape(
            payload["output_dim"], payload["input_dim"]
        )
        model.explained_variance_ = np.asarray(
            payload.get("explained_variance", [np.nan] * model.n_components), dtype=float
        )
        model.n_features_in_ = int(payload["input_dim"])
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def fit_pca(embeddings, output_dim: int) -> PCAReducer:
    return PCAReducer(n_components=output_dim).fit(np.asarray(embeddings, dtype=float))


def transform_pca(model: PCAReducer, x) -> np.ndarray:
    return model.transform(x)
