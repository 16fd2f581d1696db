import numpy as np
import pytest

from adaptive_conformal.data import ClaimRecord, LongFormRecord, McqaRecord


def make_longform(rng, n, dim=4, max_claims=6, n_categories=3, id_prefix="r"):
    """Random long-form records with heterogeneous per-category score scales."""
    scales = rng.uniform(0.5, 5.0, size=n_categories)
    centers = rng.normal(scale=3.0, size=(n_categories, dim))
    records = []
    for i in range(n):
        c = int(rng.integers(n_categories))
        m = int(rng.integers(1, max_claims + 1))
        claims = tuple(
            ClaimRecord(f"c{j}", float(scales[c] * rng.random()), int(rng.random() > 0.3)) for j in range(m)
        )
        emb = centers[c] + rng.normal(scale=0.3, size=dim)
        records.append(LongFormRecord(f"{id_prefix}{i}", f"cat{c}", emb, claims))
    return records


def make_mcqa(rng, n, dim=4, k=4, n_categories=3, id_prefix="m"):
    temps = rng.uniform(0.3, 3.0, size=n_categories)
    centers = rng.normal(scale=3.0, size=(n_categories, dim))
    records = []
    for i in range(n):
        c = int(rng.integers(n_categories))
        logits = temps[c] * rng.normal(size=k)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        y = int(rng.choice(k, p=p))
        emb = centers[c] + rng.normal(scale=0.3, size=dim)
        records.append(McqaRecord(f"{id_prefix}{i}", f"cat{c}", emb, p, y))
    return records


def brute_pr_auc(scores, labels):
    """Enumerate every distinct threshold, highest first, and sum rectangles."""
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        chosen = [l for s, l in zip(scores, labels) if s >= t]
        tp = float(sum(chosen))
        precision = tp / float(len(chosen))
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


_ACCEPTANCE_LINES = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
