"""Coverage and removal metrics, PR-AUC, calibration error and performance profiles."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CoverageReport",
    "PerformanceProfile",
    "coverage_by_group",
    "removed_fraction",
    "pr_auc",
    "claim_pr_auc",
    "calibration_error",
    "dolan_more",
    "log_delta_grid",
    "EPS",
    "RATIO_CAP",
]

EPS = 1e-12
RATIO_CAP = 1e6


@dataclass
class CoverageReport:
    per_category: dict[str, tuple[float, float, int]]
    marginal_coverage: float
    alpha: float
    marginal_removed: float = float("nan")

    def calibration_errors(self) -> dict[str, float]:
        return {c: calibration_error(cov, self.alpha) for c, (cov, _, _) in self.per_category.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "n", "coverage", "removed_fraction", "calibration_error", "alpha"])
        n_total = 0
        for cat in sorted(self.per_category):
            cov, rem, n = self.per_category[cat]
            n_total += n
            writer.writerow([cat, n, repr(cov), repr(rem), repr(calibration_error(cov, self.alpha)), repr(self.alpha)])
        writer.writerow(
            [
                "__marginal__",
                n_total,
                repr(self.marginal_coverage),
                repr(self.marginal_removed),
                repr(calibration_error(self.marginal_coverage, self.alpha)),
                repr(self.alpha),
            ]
        )
        return buf.getvalue()

    def summary(self) -> str:
        target = 1 - self.alpha
        lines = [f"target coverage {target:.2%}, marginal {self.marginal_coverage:.2%}"]
        for cat in sorted(self.per_category):
            cov, rem, n = self.per_category[cat]
            lines.append(f"  {cat:<24} n={n:<6d} coverage {cov:7.2%}  removed {rem:7.2%}")
        return "\n".join(lines)


def coverage_by_group(results: Iterable[tuple[str, bool, float]], alpha: float) -> CoverageReport:
    """Aggregate ``(category, success, removed_fraction)`` triples."""
    hits: dict[str, list] = defaultdict(list)
    removed: dict[str, list] = defaultdict(list)
    for cat, ok, rem in results:
        hits[cat].append(bool(ok))
        removed[cat].append(float(rem))
    if not hits:
        raise ValueError("no results to aggregate")
    per_cat = {
        cat: (float(np.mean(hits[cat])), float(np.mean(removed[cat])), len(hits[cat])) for cat in hits
    }
    all_hits = [h for v in hits.values() for h in v]
    all_removed = [r for v in removed.values() for r in v]
    return CoverageReport(per_cat, float(np.mean(all_hits)), alpha, float(np.mean(all_removed)))


def removed_fraction(record, retained: Sequence) -> float:
    n = len(record.claims)
    if len(retained) > n:
        raise ValueError("retained set larger than the claim list")
    return 1.0 - len(retained) / n


def pr_auc(scores, labels) -> float:
    """Area under the step precision-recall curve; ``labels == 1`` is positive.

    Items are ranked by descending score; tied scores enter at one
    threshold. Equals ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = tp[ends].astype(float)
    predicted = ends + 1.0
    precision = tp / predicted
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def claim_pr_auc(records) -> float:
    """PR-AUC of claim uncertainties for detecting incorrect claims."""
    scores = [c.uncertainty for r in records for c in r.claims]
    wrong = [1 - c.label for r in records for c in r.claims]
    return pr_auc(scores, wrong)


def calibration_error(empirical_coverage: float, alpha: float) -> float:
    if not (0 <= empirical_coverage <= 1 and 0 <= alpha <= 1):
        raise ValueError("coverage and alpha must lie in [0, 1]")
    return abs(empirical_coverage - (1.0 - alpha))


def log_delta_grid(points: int = 200, cap: float = RATIO_CAP) -> np.ndarray:
    return np.logspace(0.0, np.log10(cap), points)


@dataclass
class PerformanceProfile:
    methods: list[str]
    ratios: np.ndarray
    deltas: np.ndarray
    curve: dict[str, np.ndarray] = field(default_factory=dict)
    eps: float = EPS
    ratio_cap: float = RATIO_CAP

    def rho(self, method: str, delta: float) -> float:
        j = self.methods.index(method)
        return float(np.mean(self.ratios[:, j] <= delta))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["delta", *self.methods])
        for i, d in enumerate(self.deltas):
            writer.writerow([repr(float(d)), *(repr(float(self.curve[m][i])) for m in self.methods)])
        return buf.getvalue()

    def ratios_csv(self, problems: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["problem", *self.methods])
        for p, row in enumerate(self.ratios):
            label = problems[p] if problems is not None else str(p)
            writer.writerow([label, *(repr(float(r)) for r in row)])
        return buf.getvalue()


def dolan_more(errors, delta_grid=None, methods: Sequence[str] | None = None, eps: float = EPS, ratio_cap: float = RATIO_CAP) -> PerformanceProfile:
    """Performance ratios against the per-problem best and their CDF curves.

    A problem whose best error is exactly 0 gets ``eps`` added to every
    method's error before dividing. Ratios are capped at ``ratio_cap``.
    """
    t = np.asarray(errors, dtype=float)
    if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
        raise ValueError("errors must be a non-empty problems x methods matrix")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValueError("errors must be finite and non-negative")
    best = t.min(axis=1, keepdims=True)
    shifted = np.where(best == 0, t + eps, t)
    with np.errstate(over="ignore"):  # subnormal best errors; capped below
        ratios = np.minimum(shifted / shifted.min(axis=1, keepdims=True), ratio_cap)
    deltas = log_delta_grid(cap=ratio_cap) if delta_grid is None else np.asarray(delta_grid, dtype=float)
    names = list(methods) if methods is not None else [f"method{j}" for j in range(t.shape[1])]
    curve = {m: np.mean(ratios[:, [j]] <= deltas[None, :], axis=0) for j, m in enumerate(names)}
    return PerformanceProfile(names, ratios, deltas, curve, eps, ratio_cap)
