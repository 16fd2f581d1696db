import io
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_conformal.data import (
    ClaimRecord,
    DataError,
    LongFormRecord,
    McqaRecord,
    PipelineConfig,
    SplitSpec,
    dump_longform_dataset,
    dump_mcqa_dataset,
    parse_longform_dataset,
    parse_mcqa_dataset,
    split_dataset,
)


def _lf_line(**overrides):
    obj = {
        "id": "q1",
        "category": "books",
        "embedding": [0.1, 0.2, 0.3, 0.4],
        "claims": [
            {"text": "a", "score": 0.1, "label": 1},
            {"text": "b", "score": 0.3, "label": 0},
        ],
    }
    obj.update(overrides)
    return json.dumps(obj) + "\n"


def test_parse_longform_two_claims():
    (rec,) = parse_longform_dataset(io.StringIO(_lf_line()))
    assert len(rec.claims) == 2
    assert rec.embedding.shape == (4,)


def test_parse_longform_worked_example():
    line = _lf_line(
        prompt="When was Pride and Prejudice published?",
        claims=[
            {"text": "Pride and Prejudice was published in 1813", "score": 0.10, "label": 1},
            {"text": "Pride and Prejudice became widely popular in the 19th century", "score": 0.55, "label": 0},
        ],
    )
    (rec,) = parse_longform_dataset([line])
    assert rec.uncertainties.tolist() == [0.10, 0.55]
    assert rec.labels.tolist() == [1, 0]


def test_negative_uncertainty_rejected():
    line = _lf_line(claims=[{"text": "a", "score": -0.1, "label": 1}])
    with pytest.raises(DataError, match="uncertainty negative"):
        parse_longform_dataset([line])


@pytest.mark.parametrize(
    "line, message",
    [
        ("{not json\n", "line 1: malformed JSON"),
        (_lf_line(claims=[]), "empty claim list"),
        (_lf_line(claims=[{"text": "a", "score": 0.2, "label": 0.5}]), "label"),
        (_lf_line(embedding="oops"), "embedding"),
    ],
)
def test_longform_errors(line, message):
    with pytest.raises(DataError, match=message):
        parse_longform_dataset([line])


def test_missing_field_reports_line_and_field():
    obj = json.loads(_lf_line())
    del obj["category"]
    with pytest.raises(DataError, match=r"line 2: missing field 'category'"):
        parse_longform_dataset([_lf_line(id="x"), json.dumps(obj)])


def test_inconsistent_dimension_rejected():
    lines = [_lf_line(id="a"), _lf_line(id="b", embedding=[1.0, 2.0])]
    with pytest.raises(DataError, match="inconsistent embedding dimension"):
        parse_longform_dataset(lines)


def test_duplicate_ids_rejected():
    with pytest.raises(DataError, match="duplicate id"):
        parse_longform_dataset([_lf_line(), _lf_line()])


def _mc_line(probs, answer=0, rid="m1"):
    return json.dumps({"id": rid, "category": "law", "embedding": [0.0, 1.0], "probs": probs, "answer": answer})


def test_parse_mcqa_valid():
    (rec,) = parse_mcqa_dataset([_mc_line([0.7, 0.2, 0.1])])
    assert rec.true_class == 0 and rec.n_classes == 3


def test_parse_mcqa_uniform_four_choice():
    (rec,) = parse_mcqa_dataset([_mc_line([0.25] * 4, answer=3)])
    assert rec.n_classes == 4


def test_mcqa_simplex_check():
    with pytest.raises(DataError, match="probabilities do not sum to 1"):
        parse_mcqa_dataset([_mc_line([0.5, 0.3, 0.1])])


def test_mcqa_answer_out_of_range():
    with pytest.raises(DataError, match="out of range"):
        parse_mcqa_dataset([_mc_line([0.5, 0.5], answer=2)])


def _records(n, dim=3):
    rng = np.random.default_rng(0)
    return [
        LongFormRecord(f"r{i}", "c", rng.normal(size=dim), (ClaimRecord("x", float(rng.random()), 1),))
        for i in range(n)
    ]


def test_split_sizes_default_proportions():
    cal1, cal2, test = split_dataset(_records(100), SplitSpec((0.3, 0.4, 0.3), seed=7))
    assert (len(cal1), len(cal2), len(test)) == (30, 40, 30)


def test_split_deterministic():
    recs = _records(50)
    a = split_dataset(recs, SplitSpec(seed=11))
    b = split_dataset(recs, SplitSpec(seed=11))
    assert [[r.id for r in part] for part in a] == [[r.id for r in part] for part in b]


def test_split_ten_records_partition():
    recs = _records(10)
    parts = split_dataset(recs, SplitSpec((0.3, 0.4, 0.3), seed=1))
    assert [len(p) for p in parts] == [3, 4, 3]
    # exhaustive membership: every id exactly once across the three parts
    seen = Counter(r.id for p in parts for r in p)
    assert seen == Counter(r.id for r in recs)
    assert all(v == 1 for v in seen.values())


def test_split_errors():
    with pytest.raises(DataError, match="at least 3"):
        split_dataset(_records(2), SplitSpec())
    with pytest.raises(DataError, match="calibration part empty"):
        split_dataset(_records(4), SplitSpec((0.1, 0.45, 0.45)))


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(3, 300),
    raw=st.tuples(st.floats(0.05, 1), st.floats(0.05, 1), st.floats(0.05, 1)),
    seed=st.integers(0, 2**31),
)
def test_split_is_partition_with_floor_sizes(n, raw, seed):
    total = sum(raw)
    props = (raw[0] / total, raw[1] / total, 1 - raw[0] / total - raw[1] / total)
    recs = _records(n, dim=1)
    try:
        parts = split_dataset(recs, SplitSpec(props, seed))
    except DataError:
        return
    ids = [r.id for p in parts for r in p]
    assert sorted(ids) == sorted(r.id for r in recs)
    assert abs(len(parts[0]) - n * props[0]) < 1
    assert abs(len(parts[1]) - n * props[1]) < 1


def test_splitspec_validation():
    with pytest.raises(DataError):
        SplitSpec((0.5, 0.5, 0.5))
    with pytest.raises(DataError):
        SplitSpec((0.0, 0.5, 0.5))


def test_pipeline_config_validation():
    PipelineConfig()
    with pytest.raises(DataError):
        PipelineConfig(alpha=1.0)
    with pytest.raises(DataError):
        PipelineConfig(beta=0.5)
    with pytest.raises(DataError):
        PipelineConfig(tau_floor=0.0)
    with pytest.raises(DataError):
        PipelineConfig(transform_mode="log")


claim_st = st.builds(
    ClaimRecord,
    text=st.text(max_size=20),
    uncertainty=st.floats(0, 1e6, allow_nan=False),
    label=st.sampled_from([0, 1]),
)


@settings(max_examples=50, deadline=None)
@given(
    claims=st.lists(claim_st, min_size=1, max_size=6),
    emb=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=5),
    prompt=st.one_of(st.none(), st.text(max_size=10)),
)
def test_longform_roundtrip(claims, emb, prompt):
    rec = LongFormRecord("id-1", "cat", emb, tuple(claims), prompt)
    buf = io.StringIO()
    dump_longform_dataset([rec], buf)
    (back,) = parse_longform_dataset(io.StringIO(buf.getvalue()))
    assert back == rec


@settings(max_examples=50, deadline=None)
@given(
    weights=st.lists(st.floats(0.01, 10), min_size=2, max_size=6),
    emb=st.lists(st.floats(-10, 10), min_size=1, max_size=4),
    data=st.data(),
)
def test_mcqa_roundtrip(weights, emb, data):
    probs = np.array(weights) / sum(weights)
    answer = data.draw(st.integers(0, len(weights) - 1))
    rec = McqaRecord("m", "cat", emb, probs, answer, "q?")
    buf = io.StringIO()
    dump_mcqa_dataset([rec], buf)
    (back,) = parse_mcqa_dataset(io.StringIO(buf.getvalue()))
    assert back == rec
