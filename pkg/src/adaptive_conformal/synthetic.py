"""Synthetic worlds with known conditional quantiles and a coverage harness.

Long-form world: a record of category ``c`` has ``m`` claims (``m`` uniform
on ``claims_per_record``), each with uncertainty uniform on
``[0, uncertainty_scale]`` and independently incorrect with probability
``incorrect_rate``. The response score ``V / uncertainty_scale`` then has
CDF ``1 - E_m[(1 - r u)^m]`` on ``[0, 1]`` plus an atom at ``+inf``, so the
conditional quantile of ``V`` is the category scale times a constant.

MCQA world: class probabilities are ``softmax(sharpness * z)`` with standard
normal ``z``, and the true class is drawn from those probabilities.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .conformal import (
    filtration,
    lower_conformal_threshold,
    lower_rank,
    transform_score,
    upper_conformal_quantile,
    upper_rank,
)
from .data import ClaimRecord, DataError, LongFormRecord, McqaRecord
from .pca import PCAReducer
from .quantile import MLPQuantileRegressor

__all__ = [
    "SyntheticCategorySpec",
    "TrialReport",
    "gen_longform",
    "gen_mcqa",
    "longform_score_cdf",
    "oracle_tau",
    "run_coverage_trials",
    "exhaustive_success_probability",
    "METHODS",
]

METHODS = ("original", "adaptive-oracle", "adaptive-learned")


@dataclass(frozen=True)
class SyntheticCategorySpec:
    name: str
    embedding_center: tuple[float, ...]
    embedding_noise: float = 0.1
    claims_per_record: tuple[int, int] = (3, 6)
    uncertainty_scale: float = 1.0
    incorrect_rate: float = 0.3
    sharpness: float = 2.0
    n_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "embedding_center", tuple(float(v) for v in self.embedding_center))
        lo, hi = self.claims_per_record
        object.__setattr__(self, "claims_per_record", (int(lo), int(hi)))
        if not self.embedding_center:
            raise DataError(f"category {self.name!r}: empty embedding_center")
        if not 1 <= lo <= hi:
            raise DataError(f"category {self.name!r}: invalid claims_per_record {lo}..{hi}")
        if not self.embedding_noise > 0 or not self.uncertainty_scale > 0:
            raise DataError(f"category {self.name!r}: noise and scale must be positive")
        # 0 is allowed for the all-correct degenerate world
        if not 0 <= self.incorrect_rate < 1:
            raise DataError(f"category {self.name!r}: incorrect_rate must lie in [0, 1)")
        if self.sharpness < 0 or self.n_classes < 2:
            raise DataError(f"category {self.name!r}: need sharpness >= 0 and n_classes >= 2")

    @classmethod
    def from_dict(cls, payload: dict) -> "SyntheticCategorySpec":
        for key in ("name", "embedding_center"):
            if key not in payload:
                raise DataError(f"category spec missing field '{key}'")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise DataError(f"unknown category spec field(s): {sorted(unknown)}")
        return cls(**payload)


@dataclass
class TrialReport:
    trials: int
    success_rate: float
    per_category_rates: dict[str, float]
    theoretical_band: tuple[float, float]
    per_category_counts: dict[str, int] = field(default_factory=dict)
    method: str = "original"
    task: str = "longform"
    alpha: float = 0.2
    n_cal2: int = 0
    seed: int = 0

    @property
    def spread(self) -> float:
        rates = list(self.per_category_rates.values())
        return max(rates) - min(rates) if rates else 0.0

    def to_json(self) -> str:
        payload = asdict(self)
        payload["theoretical_band"] = list(self.theoretical_band)
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "n", "success_rate", "band_low", "band_high"])
        lo, hi = self.theoretical_band
        for name in sorted(self.per_category_rates):
            writer.writerow(
                [name, self.per_category_counts.get(name, 0), repr(self.per_category_rates[name]), repr(lo), repr(hi)]
            )
        writer.writerow(["__marginal__", self.trials, repr(self.success_rate), repr(lo), repr(hi)])
        return buf.getvalue()


def _draw_embeddings(rng, spec, n):
    center = np.asarray(spec.embedding_center)
    return center + spec.embedding_noise * rng.standard_normal((n, center.size))


def _draw_longform_arrays(rng, spec: SyntheticCategorySpec, n: int):
    """Embeddings, padded claim arrays and validity mask for ``n`` records."""
    lo, hi = spec.claims_per_record
    emb = _draw_embeddings(rng, spec, n)
    m = rng.integers(lo, hi + 1, size=n)
    unc = spec.uncertainty_scale * rng.random((n, hi))
    wrong = rng.random((n, hi)) < spec.incorrect_rate
    valid = np.arange(hi)[None, :] < m[:, None]
    return emb, unc, wrong, valid


def _scores_from_arrays(unc, wrong, valid):
    return np.where(wrong & valid, unc, np.inf).min(axis=1)


def gen_longform(specs: Sequence[SyntheticCategorySpec], n_per_category: int, seed: int = 0):
    if n_per_category < 1:
        raise DataError("n_per_category must be >= 1")
    rng = np.random.default_rng(seed)
    records = []
    for spec in specs:
        emb, unc, wrong, valid = _draw_longform_arrays(rng, spec, n_per_category)
        for i in range(n_per_category):
            claims = tuple(
                ClaimRecord(f"{spec.name} claim {j}", float(unc[i, j]), int(not wrong[i, j]))
                for j in range(int(valid[i].sum()))
            )
            records.append(LongFormRecord(f"{spec.name}-{i}", spec.name, emb[i], claims))
    return records


def _draw_probs(rng, spec: SyntheticCategorySpec, n: int):
    z = rng.standard_normal((n, spec.n_classes))
    if math.isinf(spec.sharpness):
        probs = np.zeros_like(z)
        probs[np.arange(n), z.argmax(axis=1)] = 1.0
    else:
        logits = spec.sharpness * z
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(n)[:, None] * cum[:, -1:]
    true = np.minimum((u >= cum).sum(axis=1), spec.n_classes - 1)
    return probs, true


def gen_mcqa(specs: Sequence[SyntheticCategorySpec], n_per_category: int, seed: int = 0):
    if n_per_category < 1:
        raise DataError("n_per_category must be >= 1")
    rng = np.random.default_rng(seed)
    records = []
    for spec in specs:
        emb = _draw_embeddings(rng, spec, n_per_category)
        probs, true = _draw_probs(rng, spec, n_per_category)
        for i in range(n_per_category):
            records.append(McqaRecord(f"{spec.name}-{i}", spec.name, emb[i], probs[i], int(true[i])))
    return records


def longform_score_cdf(spec: SyntheticCategorySpec, v):
    """``P(V <= v)`` for one category of the long-form world."""
    lo, hi = spec.claims_per_record
    u = np.clip(np.asarray(v, dtype=float) / spec.uncertainty_scale, 0.0, 1.0)
    ms = np.arange(lo, hi + 1)
    surv = np.mean((1.0 - spec.incorrect_rate * u[..., None]) ** ms, axis=-1)
    out = 1.0 - surv
    return float(out) if np.ndim(out) == 0 else out


def oracle_tau(spec: SyntheticCategorySpec, level: float, task: str = "longform", mc_samples: int = 200_000) -> float:
    """Conditional ``level``-quantile of the category's score.

    Closed form (root of the CDF) for long-form; a fixed-seed Monte Carlo
    quantile of the LAC score for MCQA.
    """
    if task == "longform":
        top = longform_score_cdf(spec, spec.uncertainty_scale)
        if level >= top:
            return math.inf
        return brentq(lambda v: longform_score_cdf(spec, v) - level, 0.0, spec.uncertainty_scale, xtol=1e-14)
    probs, true = _draw_probs(np.random.default_rng(12345), spec, mc_samples)
    return float(np.quantile(1.0 - probs[np.arange(mc_samples), true], level))


def _band(alpha: float, n: int) -> tuple[float, float]:
    return (1.0 - alpha, 1.0 - alpha + 1.0 / (n + 1))


def _trial_rng(seed: int, trial: int):
    return np.random.default_rng([seed, trial])


def _fit_learned(specs, task, alpha, n_cal1, seed, pca_dim, regressor_params):
    """Train PCA and the quantile network once on a fresh first calibration split."""
    rng = np.random.default_rng([seed, 2**31])
    cats = rng.integers(len(specs), size=n_cal1)
    embs, scores = [], []
    for ci, spec in enumerate(specs):
        n = int((cats == ci).sum())
        if n == 0:
            continue
        if task == "longform":
            emb, unc, wrong, valid = _draw_longform_arrays(rng, spec, n)
            v = _scores_from_arrays(unc, wrong, valid)
        else:
            emb = _draw_embeddings(rng, spec, n)
            probs, true = _draw_probs(rng, spec, n)
            v = 1.0 - probs[np.arange(n), true]
        embs.append(emb)
        scores.append(v)
    emb = np.vstack(embs)
    v = np.concatenate(scores)
    pca = PCAReducer(min(pca_dim, emb.shape[1])).fit(emb)
    finite = np.isfinite(v)
    level = alpha if task == "longform" else 1.0 - alpha
    params = {"level": level, "random_state": seed, **(regressor_params or {})}
    reg = MLPQuantileRegressor(**params).fit(pca.transform(emb[finite]), v[finite])
    return pca, reg


def run_coverage_trials(
    specs: Sequence[SyntheticCategorySpec],
    alpha: float,
    n_cal2: int,
    trials: int,
    method: str = "original",
    seed: int = 0,
    task: str = "longform",
    n_cal1: int | None = None,
    pca_dim: int = 32,
    tau_floor: float = 1e-3,
    regressor_params: dict | None = None,
) -> TrialReport:
    """Monte Carlo estimate of the probability that a test record is covered.

    Each trial draws ``n_cal2`` calibration records and one test record
    (categories uniform over ``specs``), calibrates, and records whether
    every kept claim is correct (long-form) or the true class is in the
    answer set (MCQA). Trial ``t`` uses the generator seeded by
    ``(seed, t)``, so trials are independent of execution order.

    ``adaptive-learned`` fits PCA and the quantile network once on
    ``n_cal1`` extra records (default ``0.75 * n_cal2``, the 0.3/0.4 ratio)
    and reuses them across trials.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if task not in ("longform", "mcqa"):
        raise ValueError("task must be 'longform' or 'mcqa'")
    specs = list(specs)
    names = [s.name for s in specs]
    level = alpha if task == "longform" else 1.0 - alpha

    if method == "adaptive-oracle":
        oracle = np.array([oracle_tau(s, level, task) for s in specs])
    if method == "adaptive-learned":
        n1 = n_cal1 if n_cal1 is not None else max(2, round(0.75 * n_cal2))
        pca, reg = _fit_learned(specs, task, alpha, n1, seed, pca_dim, regressor_params)
    mode = "none" if method == "original" else "multiplicative"

    hits = np.zeros(len(specs))
    counts = np.zeros(len(specs), dtype=int)
    for t in range(trials):
        rng = _trial_rng(seed, t)
        cats = rng.integers(len(specs), size=n_cal2 + 1)
        n_total = n_cal2 + 1
        emb = np.empty((n_total, len(specs[0].embedding_center)))
        scores = np.empty(n_total)
        test_payload = None
        for ci, spec in enumerate(specs):
            idx = np.flatnonzero(cats == ci)
            if idx.size == 0:
                continue
            if task == "longform":
                e, unc, wrong, valid = _draw_longform_arrays(rng, spec, idx.size)
                scores[idx] = _scores_from_arrays(unc, wrong, valid)
                if idx[-1] == n_cal2:
                    m = int(valid[-1].sum())
                    test_payload = [
                        ClaimRecord("", float(unc[-1, j]), int(not wrong[-1, j])) for j in range(m)
                    ]
            else:
                e = _draw_embeddings(rng, spec, idx.size)
                probs, true = _draw_probs(rng, spec, idx.size)
                scores[idx] = 1.0 - probs[np.arange(idx.size), true]
                if idx[-1] == n_cal2:
                    test_payload = (probs[-1], int(true[-1]))
            emb[idx] = e

        if method == "original":
            tau = np.ones(n_total)
        elif method == "adaptive-oracle":
            tau = oracle[cats]
        else:
            tau = np.maximum(reg.predict(pca.transform(emb)), tau_floor)

        cal = transform_score(scores[:n_cal2], tau[:n_cal2], mode)
        if task == "longform":
            q = lower_conformal_threshold(cal, alpha)
            if mode == "none":
                kept = filtration(test_payload, q)
            else:
                kept = [c for c in test_payload if transform_score(c.uncertainty, tau[-1], mode) < q]
            ok = all(c.label == 1 for c in kept)
        else:
            q = upper_conformal_quantile(cal, alpha)
            probs, true = test_payload
            ok = transform_score(1.0 - probs[true], tau[-1], mode) <= q
        hits[cats[-1]] += ok
        counts[cats[-1]] += 1

    per_cat = {n: (float(hits[i] / counts[i]) if counts[i] else float("nan")) for i, n in enumerate(names)}
    return TrialReport(
        trials=trials,
        success_rate=float(hits.sum() / trials),
        per_category_rates=per_cat,
        theoretical_band=_band(alpha, n_cal2),
        per_category_counts={n: int(counts[i]) for i, n in enumerate(names)},
        method=method,
        task=task,
        alpha=alpha,
        n_cal2=n_cal2,
        seed=seed,
    )


def exhaustive_success_probability(values: Sequence[float], alpha: float, task: str = "longform") -> Fraction:
    """Exact coverage probability over all orderings of ``values``.

    Every permutation assigns the last value to the test point and the rest
    to calibration; calibration and the success check run through the real
    filtering / set rules. Values must be distinct.
    """
    values = list(values)
    n = len(values) - 1
    if n < 1:
        raise ValueError("need at least two values")
    wins = 0
    total = 0
    for perm in itertools.permutations(values):
        cal, test = perm[:-1], perm[-1]
        if task == "longform":
            q = lower_conformal_threshold(cal, alpha)
            # one incorrect claim at the test score, one correct claim below it
            claims = [ClaimRecord("", test / 2, 1), ClaimRecord("", test, 0)]
            ok = all(c.label == 1 for c in filtration(claims, q))
        else:
            ok = test <= upper_conformal_quantile(cal, alpha)
        wins += ok
        total += 1
    return Fraction(wins, total)


def exact_rank_probability(n: int, alpha: float, task: str = "longform") -> Fraction:
    """``k_alpha / (n+1)`` for the rank rule used by ``task``."""
    if task == "longform":
        return Fraction(n + 1 - lower_rank(n, alpha), n + 1)
    return Fraction(min(upper_rank(n, alpha), n + 1), n + 1)
