"""Split conformal calibration with embedding-conditioned score normalization.

Two tasks share one estimator:

``longform``
    The score of a response is the smallest uncertainty among its incorrect
    claims (``+inf`` when every claim is correct), i.e. the largest
    threshold at which strict filtering keeps only correct claims. Large
    scores are *good*, so the calibrated threshold is a lower order
    statistic and claims are kept when their normalized uncertainty is
    strictly below it.

``mcqa``
    The least-ambiguous-classifier score ``1 - p[y]``. Large scores are
    bad; the threshold is the usual upper order statistic and a class
    enters the set when its normalized score is at most the threshold.

In both cases the scores of the second calibration split are divided by
(``multiplicative``) or shifted by (``additive``) the conditional quantile
predicted from the prompt embedding, and the same normalization is applied
at test time.
"""

from __future__ import annotations

import json
import math
from fractions import Fraction
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .data import ClaimRecord, LongFormRecord, McqaRecord, PipelineConfig
from .pca import PCAReducer
from .quantile import MLPQuantileRegressor, TrainConfig, regressor_from_dict

__all__ = [
    "CalibrationError",
    "filtration",
    "longform_score",
    "lac_score",
    "upper_conformal_quantile",
    "lower_conformal_threshold",
    "transform_score",
    "AdaptiveConformalFactuality",
    "calibrate_longform",
    "calibrate_mcqa",
    "filter_test_longform",
    "predict_set_mcqa",
    "load_predictor",
]

FORMAT_VERSION = 1
TASKS = ("longform", "mcqa")


class CalibrationError(RuntimeError):
    """The calibration data cannot support the requested pipeline."""


def filtration(claims: Sequence[ClaimRecord], t: float) -> list[ClaimRecord]:
    """Claims whose uncertainty is strictly below ``t``."""
    return [c for c in claims if c.uncertainty < t]


def longform_score(claims: Sequence[ClaimRecord]) -> float:
    wrong = [c.uncertainty for c in claims if c.label == 0]
    return min(wrong) if wrong else math.inf


def lac_score(probs, y: int) -> float:
    return 1.0 - float(probs[y])


def _scores_array(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("empty score list")
    if np.any(np.isnan(arr)):
        raise ValueError("scores contain NaN")
    return arr


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def upper_rank(n: int, alpha: float) -> int:
    """``ceil((n+1)(1-alpha))`` evaluated exactly on the binary value of ``alpha``."""
    return math.ceil((n + 1) * (1 - Fraction(alpha)))


def lower_rank(n: int, alpha: float) -> int:
    """``floor((n+1)alpha)`` evaluated exactly on the binary value of ``alpha``."""
    return math.floor((n + 1) * Fraction(alpha))


def upper_conformal_quantile(scores, alpha: float) -> float:
    """The ``ceil((N+1)(1-alpha))``-th smallest score, ``+inf`` past ``N``."""
    _check_alpha(alpha)
    arr = _scores_array(scores)
    n = arr.size
    k = upper_rank(n, alpha)
    if k > n:
        return math.inf
    return float(np.partition(arr, k - 1)[k - 1])


def lower_conformal_threshold(scores, alpha: float, empty: float = 0.0) -> float:
    """The ``floor((N+1)alpha)``-th smallest score.

    When that rank is 0 there is no calibrated threshold and ``empty`` is
    returned; the default 0 retains nothing for non-negative scores.
    """
    _check_alpha(alpha)
    arr = _scores_array(scores)
    k = lower_rank(arr.size, alpha)
    if k == 0:
        return empty
    return float(np.partition(arr, k - 1)[k - 1])


def transform_score(v, tau, mode: str):
    """Normalize score(s) ``v`` by ``tau``; ``+inf`` stays ``+inf``."""
    if mode == "multiplicative":
        out = np.divide(v, tau)
    elif mode == "additive":
        out = np.subtract(v, tau)
    elif mode == "none":
        out = np.asarray(v, dtype=float) + 0.0
    else:
        raise ValueError(f"unknown transform mode {mode!r}")
    return float(out) if np.ndim(out) == 0 else out


def _encode_ext(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _decode_ext(x) -> float:
    return float(x)


class AdaptiveConformalFactuality(BaseEstimator):
    """Prompt-adaptive split conformal filter (long-form) or set predictor (MCQA).

    Parameters
    ----------
    task : {"longform", "mcqa"}, default="longform"
    alpha : float, default=0.2
        Target miscoverage.
    transform_mode : {"multiplicative", "additive", "none"}, default="multiplicative"
        ``"none"`` is plain split conformal: no embedding model is fit and
        the normalizer is 1.
    pca_dim : int, default=32
        Embedding width after PCA; clipped to the raw embedding width.
    tau_floor : float, default=1e-3
        Lower clamp on the predicted quantile.
    regressor : regressor or None, default=None
        Any scikit-learn style regressor. ``None`` uses
        :class:`MLPQuantileRegressor`. When the regressor exposes a ``level``
        parameter it is set to ``alpha`` (longform) or ``1 - alpha`` (mcqa).
    random_state : int, default=0
        Passed to the regressor when it accepts one.

    Attributes
    ----------
    pca_ : PCAReducer or None
    regressor_ : fitted regressor or None
    threshold_ : float
        Calibrated threshold on the normalized scale, possibly infinite.
    calibration_size_ : int
    """

    def __init__(
        self,
        task: str = "longform",
        alpha: float = 0.2,
        transform_mode: str = "multiplicative",
        pca_dim: int = 32,
        tau_floor: float = 1e-3,
        regressor=None,
        random_state: int = 0,
    ):
        self.task = task
        self.alpha = alpha
        self.transform_mode = transform_mode
        self.pca_dim = pca_dim
        self.tau_floor = tau_floor
        self.regressor = regressor
        self.random_state = random_state

    @property
    def regressor_level(self) -> float:
        return self.alpha if self.task == "longform" else 1.0 - self.alpha

    def _validate(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        _check_alpha(self.alpha)
        if self.transform_mode not in ("multiplicative", "additive", "none"):
            raise ValueError(f"unknown transform mode {self.transform_mode!r}")
        if not self.tau_floor > 0:
            raise ValueError("tau_floor must be positive")

    def _record_type(self):
        return LongFormRecord if self.task == "longform" else McqaRecord

    def _check_records(self, records, what: str):
        if not records:
            raise CalibrationError(f"{what} is empty")
        kind = self._record_type()
        if not all(isinstance(r, kind) for r in records):
            raise TypeError(f"{self.task} predictor needs {kind.__name__} inputs")

    def scores(self, records) -> np.ndarray:
        """Raw nonconformity score of each record."""
        if self.task == "longform":
            return np.array([longform_score(r.claims) for r in records], dtype=float)
        return np.array([lac_score(r.class_probs, r.true_class) for r in records])

    def _make_regressor(self):
        reg = MLPQuantileRegressor() if self.regressor is None else clone(self.regressor)
        params = reg.get_params()
        updates = {}
        if "level" in params:
            updates["level"] = self.regressor_level
        if "random_state" in params:
            updates["random_state"] = self.random_state
        return reg.set_params(**updates)

    def fit(self, cal1, cal2):
        """Fit the embedding model on ``cal1`` and calibrate on ``cal2``."""
        self._validate()
        self._check_records(cal2, "second calibration split")
        self.pca_ = None
        self.regressor_ = None
        if self.transform_mode != "none":
            self._check_records(cal1, "first calibration split")
            emb = np.vstack([r.embedding for r in list(cal1) + list(cal2)])
            self.pca_ = PCAReducer(min(self.pca_dim, emb.shape[1])).fit(emb)
            v1 = self.scores(cal1)
            finite = np.isfinite(v1)
            if not finite.any():
                raise CalibrationError(
                    "every first-split score is infinite; no regression targets "
                    "(use transform_mode='none')"
                )
            z1 = self.pca_.transform(np.vstack([r.embedding for r in cal1]))
            self.regressor_ = self._make_regressor().fit(z1[finite], v1[finite])

        v2 = transform_score(self.scores(cal2), self.tau(cal2), self.transform_mode)
        if self.task == "longform":
            empty = -math.inf if self.transform_mode == "additive" else 0.0
            self.threshold_ = lower_conformal_threshold(v2, self.alpha, empty=empty)
        else:
            self.threshold_ = upper_conformal_quantile(v2, self.alpha)
        self.calibration_size_ = len(cal2)
        return self

    def tau(self, records) -> np.ndarray:
        """Clamped normalizer for each record (ones when ``transform_mode='none'``)."""
        if self.transform_mode == "none":
            return np.ones(len(records))
        check_is_fitted(self, "regressor_")
        z = self.pca_.transform(np.vstack([r.embedding for r in records]))
        return np.maximum(np.asarray(self.regressor_.predict(z), dtype=float), self.tau_floor)

    def predict(self, records):
        """Retained claims per long-form record, or answer sets per MCQA record."""
        check_is_fitted(self, "threshold_")
        records = list(records)
        if not records:
            return []
        kind = self._record_type()
        if not all(isinstance(r, kind) for r in records):
            raise TypeError(f"{self.task} predictor needs {kind.__name__} inputs")
        taus = self.tau(records)
        if self.task == "longform":
            return [self._retain(r, t) for r, t in zip(records, taus)]
        return [self._answer_set(r, t) for r, t in zip(records, taus)]

    def _retain(self, record: LongFormRecord, tau: float) -> list[ClaimRecord]:
        normalized = transform_score(record.uncertainties, tau, self.transform_mode)
        return [c for c, s in zip(record.claims, normalized) if s < self.threshold_]

    def _answer_set(self, record: McqaRecord, tau: float) -> set[int]:
        normalized = transform_score(1.0 - record.class_probs, tau, self.transform_mode)
        return {int(y) for y in np.flatnonzero(normalized <= self.threshold_)}

    def covered(self, records) -> np.ndarray:
        """Success flag per record: all kept claims correct, or true class in the set."""
        out = []
        for r, kept in zip(records, self.predict(records)):
            if self.task == "longform":
                out.append(all(c.label == 1 for c in kept))
            else:
                out.append(r.true_class in kept)
        return np.array(out, dtype=bool)

    def to_dict(self) -> dict:
        check_is_fitted(self, "threshold_")
        return {
            "version": FORMAT_VERSION,
            "task": self.task,
            "alpha": self.alpha,
            "transform_mode": self.transform_mode,
            "pca_dim": self.pca_dim,
            "tau_floor": self.tau_floor,
            "random_state": self.random_state,
            "threshold": _encode_ext(self.threshold_),
            "calibration_size": self.calibration_size_,
            "pca": None if self.pca_ is None else self.pca_.to_dict(),
            "regressor": None if self.regressor_ is None else self.regressor_.to_dict(),
            "metadata": getattr(self, "metadata_", {}),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AdaptiveConformalFactuality":
        if payload.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported predictor version {payload.get('version')!r}")
        model = cls(
            task=payload["task"],
            alpha=payload["alpha"],
            transform_mode=payload["transform_mode"],
            pca_dim=payload["pca_dim"],
            tau_floor=payload["tau_floor"],
            random_state=payload["random_state"],
        )
        model.threshold_ = _decode_ext(payload["threshold"])
        model.calibration_size_ = payload["calibration_size"]
        model.pca_ = None if payload["pca"] is None else PCAReducer.from_dict(payload["pca"])
        model.regressor_ = (
            None if payload["regressor"] is None else regressor_from_dict(payload["regressor"])
        )
        model.metadata_ = payload.get("metadata", {})
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def load_predictor(text: str) -> AdaptiveConformalFactuality:
    return AdaptiveConformalFactuality.from_dict(json.loads(text))


def _from_configs(task, cfg: PipelineConfig, train_cfg: TrainConfig, regressor=None):
    if regressor is None:
        regressor = MLPQuantileRegressor(
            hidden_dim=train_cfg.hidden_dim,
            epochs=train_cfg.epochs,
            batch_size=train_cfg.batch_size,
            learning_rate=train_cfg.learning_rate,
            weight_init_scale=train_cfg.weight_init_scale,
        )
    return AdaptiveConformalFactuality(
        task=task,
        alpha=cfg.alpha,
        transform_mode=cfg.transform_mode,
        pca_dim=cfg.pca_dim,
        tau_floor=cfg.tau_floor,
        regressor=regressor,
        random_state=train_cfg.seed,
    )


def calibrate_longform(cal1, cal2, cfg=PipelineConfig(), train_cfg=TrainConfig(), regressor=None):
    return _from_configs("longform", cfg, train_cfg, regressor).fit(cal1, cal2)


def calibrate_mcqa(cal1, cal2, cfg=PipelineConfig(), train_cfg=TrainConfig(), regressor=None):
    return _from_configs("mcqa", cfg, train_cfg, regressor).fit(cal1, cal2)


def filter_test_longform(pred: AdaptiveConformalFactuality, record: LongFormRecord):
    return pred.predict([record])[0]


def predict_set_mcqa(pred: AdaptiveConformalFactuality, record: McqaRecord) -> set[int]:
    return pred.predict([record])[0]
