"""Records, JSONL ingestion and the seeded calibration/test split.

Long-form records carry a list of scored and labeled claims; multiple-choice
records carry a class-probability vector and the index of the true answer.
Both carry a raw prompt embedding and a category string.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence, TypeVar

import numpy as np

__all__ = [
    "DataError",
    "ClaimRecord",
    "LongFormRecord",
    "McqaRecord",
    "SplitSpec",
    "PipelineConfig",
    "parse_longform_dataset",
    "parse_mcqa_dataset",
    "dump_longform_dataset",
    "dump_mcqa_dataset",
    "split_dataset",
]

TRANSFORM_MODES = ("multiplicative", "additive", "none")


class DataError(ValueError):
    """Raised when a dataset line or a record violates its schema."""


def _frozen_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClaimRecord:
    """One atomic claim: its uncertainty score and binary correctness label."""

    text: str
    uncertainty: float
    label: int

    def __post_init__(self):
        u = float(self.uncertainty)
        if not math.isfinite(u):
            raise DataError("uncertainty not finite")
        if u < 0:
            raise DataError("uncertainty negative")
        if self.label not in (0, 1) or isinstance(self.label, float):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "uncertainty", u)
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True, eq=False)
class LongFormRecord:
    id: str
    category: str
    embedding: np.ndarray
    claims: tuple[ClaimRecord, ...]
    prompt: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "embedding", _frozen_vector(self.embedding, "embedding"))
        claims = tuple(self.claims)
        if not claims:
            raise DataError("empty claim list")
        object.__setattr__(self, "claims", claims)

    @property
    def uncertainties(self) -> np.ndarray:
        return np.array([c.uncertainty for c in self.claims])

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.claims], dtype=int)

    def to_json(self) -> dict:
        out = {"id": self.id, "category": self.category}
        if self.prompt is not None:
            out["prompt"] = self.prompt
        out["embedding"] = [float(v) for v in self.embedding]
        out["claims"] = [
            {"text": c.text, "score": c.uncertainty, "label": c.label} for c in self.claims
        ]
        return out

    def __eq__(self, other):
        if not isinstance(other, LongFormRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.category == other.category
            and self.prompt == other.prompt
            and np.array_equal(self.embedding, other.embedding)
            and self.claims == other.claims
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class McqaRecord:
    id: str
    category: str
    embedding: np.ndarray
    class_probs: np.ndarray
    true_class: int
    question: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "embedding", _frozen_vector(self.embedding, "embedding"))
        probs = _frozen_vector(self.class_probs, "probs")
        if np.any(probs < 0):
            raise DataError("probabilities negative")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise DataError("probabilities do not sum to 1")
        object.__setattr__(self, "class_probs", probs)
        if isinstance(self.true_class, bool) or int(self.true_class) != self.true_class:
            raise DataError("answer must be an integer class index")
        if not 0 <= self.true_class < probs.size:
            raise DataError(f"answer {self.true_class} out of range for {probs.size} classes")
        object.__setattr__(self, "true_class", int(self.true_class))

    @property
    def n_classes(self) -> int:
        return self.class_probs.size

    def to_json(self) -> dict:
        out = {"id": self.id, "category": self.category}
        if self.question is not None:
            out["question"] = self.question
        out["embedding"] = [float(v) for v in self.embedding]
        out["probs"] = [float(p) for p in self.class_probs]
        out["answer"] = self.true_class
        return out

    def __eq__(self, other):
        if not isinstance(other, McqaRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.category == other.category
            and self.question == other.question
            and self.true_class == other.true_class
            and np.array_equal(self.embedding, other.embedding)
            and np.array_equal(self.class_probs, other.class_probs)
        )

    __hash__ = None


@dataclass(frozen=True)
class SplitSpec:
    """Proportions of the (cal1, cal2, test) split and the shuffle seed."""

    proportions: tuple[float, float, float] = (0.3, 0.4, 0.3)
    seed: int = 0

    def __post_init__(self):
        props = tuple(float(p) for p in self.proportions)
        if len(props) != 3:
            raise DataError("split needs exactly three proportions")
        if any(p <= 0 for p in props):
            raise DataError("split proportions must be positive")
        if abs(sum(props) - 1.0) > 1e-9:
            raise DataError("split proportions must sum to 1")
        if int(self.seed) < 0:
            raise DataError("seed must be non-negative")
        object.__setattr__(self, "proportions", props)


@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 0.2
    beta: float = 1.0
    transform_mode: str = "multiplicative"
    pca_dim: int = 32
    tau_floor: float = 1e-3
    seed: int = 0
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise DataError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta != 1:
            raise DataError("only binary labels are supported (beta = 1)")
        if self.transform_mode not in TRANSFORM_MODES:
            raise DataError(f"transform_mode must be one of {TRANSFORM_MODES}")
        if self.pca_dim < 1:
            raise DataError("pca_dim must be >= 1")
        if not self.tau_floor > 0:
            raise DataError("tau_floor must be positive")


def _require(obj: dict, key: str, types, lineno: int):
    if key not in obj:
        raise DataError(f"line {lineno}: missing field '{key}'")
    value = obj[key]
    # bool is an int subclass; never accept it where a number is expected
    if not isinstance(value, types) or isinstance(value, bool):
        raise DataError(f"line {lineno}: field '{key}' has wrong type")
    return value


def _iter_objects(stream: IO[str] | Iterable[str]):
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"line {lineno}: expected a JSON object")
        yield lineno, obj


def _check_common(records, lineno: int, record, dims: set, ids: set):
    if record.id in ids:
        raise DataError(f"line {lineno}: duplicate id '{record.id}'")
    ids.add(record.id)
    dims.add(record.embedding.size)
    if len(dims) > 1:
        raise DataError(f"line {lineno}: inconsistent embedding dimension {record.embedding.size}")
    records.append(record)


def parse_longform_dataset(stream: IO[str] | Iterable[str]) -> list[LongFormRecord]:
    """Parse long-form JSONL into validated records, preserving order."""
    records: list[LongFormRecord] = []
    dims: set[int] = set()
    ids: set[str] = set()
    for lineno, obj in _iter_objects(stream):
        rid = _require(obj, "id", str, lineno)
        category = _require(obj, "category", str, lineno)
        embedding = _require(obj, "embedding", list, lineno)
        raw_claims = _require(obj, "claims", list, lineno)
        claims = []
        for j, c in enumerate(raw_claims):
            if not isinstance(c, dict):
                raise DataError(f"line {lineno}: claim {j} is not an object")
            score = _require(c, "score", (int, float), lineno)
            label = _require(c, "label", int, lineno)
            try:
                claims.append(ClaimRecord(str(c.get("text", "")), score, label))
            except DataError as exc:
                raise DataError(f"line {lineno}: claim {j}: {exc}") from None
        try:
            record = LongFormRecord(rid, category, embedding, tuple(claims), obj.get("prompt"))
        except (DataError, TypeError) as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        _check_common(records, lineno, record, dims, ids)
    return records


def parse_mcqa_dataset(stream: IO[str] | Iterable[str]) -> list[McqaRecord]:
    """Parse multiple-choice JSONL into validated records, preserving order."""
    records: list[McqaRecord] = []
    dims: set[int] = set()
    ids: set[str] = set()
    for lineno, obj in _iter_objects(stream):
        rid = _require(obj, "id", str, lineno)
        category = _require(obj, "category", str, lineno)
        embedding = _require(obj, "embedding", list, lineno)
        probs = _require(obj, "probs", list, lineno)
        answer = _require(obj, "answer", int, lineno)
        try:
            record = McqaRecord(rid, category, embedding, probs, answer, obj.get("question"))
        except (DataError, TypeError) as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        _check_common(records, lineno, record, dims, ids)
    return records


def _dump(records, stream: IO[str]) -> None:
    for r in records:
        stream.write(json.dumps(r.to_json(), separators=(",", ":")))
        stream.write("\n")


def dump_longform_dataset(records: Sequence[LongFormRecord], stream: IO[str]) -> None:
    _dump(records, stream)


def dump_mcqa_dataset(records: Sequence[McqaRecord], stream: IO[str]) -> None:
    _dump(records, stream)


R = TypeVar("R")


def split_dataset(records: Sequence[R], spec: SplitSpec) -> tuple[list[R], list[R], list[R]]:
    """Shuffle with ``spec.seed`` and cut into (cal1, cal2, test).

    Calibration sizes are ``floor(n * p)``; the rounding remainder goes to
    the test part.
    """
    n = len(records)
    if n < 3:
        raise DataError(f"need at least 3 records to split, got {n}")
    p1, p2, _ = spec.proportions
    n1 = math.floor(n * p1)
    n2 = math.floor(n * p2)
    if n1 == 0 or n2 == 0:
        raise DataError(f"split {spec.proportions} leaves a calibration part empty for n={n}")
    if n1 + n2 >= n:
        raise DataError(f"split {spec.proportions} leaves the test part empty for n={n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    cal1 = [records[i] for i in perm[:n1]]
    cal2 = [records[i] for i in perm[n1 : n1 + n2]]
    test = [records[i] for i in perm[n1 + n2 :]]
    return cal1, cal2, test
