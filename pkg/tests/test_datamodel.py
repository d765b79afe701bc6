import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlmrerank.datamodel import (
    AerialCandidate,
    CandidateList,
    Diagnostics,
    GroundQuery,
    RerankResult,
    SchemaError,
    StrategyId,
    candidate_record,
    load_candidates,
    load_results,
    save_candidates,
    save_results,
    validate_candidate_list,
)
from vlmrerank.simbackend import make_candidate_list, synthesize_dataset


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def _record(qid="q1", ranks=(1, 2, 3), gt="a1"):
    return {
        "query_id": qid,
        "query_image": f"g/{qid}.jpg",
        "ground_truth_id": gt,
        "candidates": [{"id": f"a{r}", "image": f"a/{r}.png", "rank": r, "score": 1.0 - r / 10} for r in ranks],
    }


def test_load_500_lists_of_20(tmp_path):
    lists = synthesize_dataset(500, 20, seed=3)
    path = tmp_path / "c.jsonl"
    save_candidates(lists, path)
    loaded = load_candidates(path)
    assert len(loaded) == 500
    assert all(cl.k == 20 and len(cl.candidates) == 20 for cl in loaded)
    assert [cl.query_id for cl in loaded] == [cl.query_id for cl in lists]


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_candidates(path) == []


def test_repeated_rank_is_named(tmp_path):
    path = tmp_path / "bad.jsonl"
    rec = _record(ranks=(1, 2, 2, 4))
    rec["candidates"][2]["id"] = "a2b"
    _write_lines(path, [_record("q0"), rec])
    with pytest.raises(SchemaError) as err:
        load_candidates(path)
    assert err.value.line == 2
    assert "rank 2" in str(err.value) and "expected 3" in str(err.value)


def test_duplicate_candidate_id_rejected(tmp_path):
    path = tmp_path / "dup.jsonl"
    rec = _record()
    rec["candidates"][1]["id"] = "a1"
    _write_lines(path, [rec])
    with pytest.raises(SchemaError, match="duplicate candidate id 'a1'"):
        load_candidates(path)


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda r: r.pop("query_id"), "query_id"),
        (lambda r: r.update(candidates="x"), "candidates"),
        (lambda r: r["candidates"][0].update(rank="1"), "candidates[0].rank"),
        (lambda r: r["candidates"][1].pop("image"), "candidates[1].image"),
        (lambda r: r["candidates"][0].update(score="high"), "candidates[0].score"),
    ],
)
def test_schema_violations_report_field(tmp_path, mutate, field):
    rec = _record()
    mutate(rec)
    path = tmp_path / "bad.jsonl"
    _write_lines(path, [rec])
    with pytest.raises(SchemaError) as err:
        load_candidates(path)
    assert err.value.field == field
    assert err.value.line == 1


def test_invalid_json_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(_record()) + "\n{not json\n")
    with pytest.raises(SchemaError, match="line 2"):
        load_candidates(path)


def test_missing_file():
    with pytest.raises(OSError):
        load_candidates("/nonexistent/file.jsonl")


def test_validate_ok_and_gt_absent():
    cl = make_candidate_list("q", 5, 2)
    report = validate_candidate_list(cl)
    assert report.ok and not report.gt_absent
    absent = make_candidate_list("q", 5, None)
    report = validate_candidate_list(absent)
    assert report.ok and report.gt_absent


def test_validate_length_mismatch():
    cl = make_candidate_list("q", 19, 1)
    short = CandidateList(cl.query, cl.candidates, cl.ground_truth_id, k=20)
    report = validate_candidate_list(short)
    assert not report.ok
    assert any("length mismatch" in v for v in report.violations)


def test_validation_is_pure():
    cl = CandidateList(GroundQuery("q", "g"), (AerialCandidate("a", "a", 2), AerialCandidate("a", "b", 2)), None, 3)
    assert validate_candidate_list(cl) == validate_candidate_list(cl)
    assert len(validate_candidate_list(cl).violations) == 3


def test_record_invariants():
    with pytest.raises(ValueError):
        GroundQuery("", "img")
    with pytest.raises(ValueError):
        AerialCandidate("a", "img", 0)
    with pytest.raises(ValueError):
        RerankResult("q", StrategyId.DIRECT, ("a",), comparator_calls=3)


def test_candidate_file_round_trip(tmp_path):
    lists = synthesize_dataset(25, 7, seed=5) + [make_candidate_list("absent", 7, None)]
    path = tmp_path / "c.jsonl"
    save_candidates(lists, path)
    assert load_candidates(path) == lists


def test_candidate_record_matches_schema():
    rec = candidate_record(make_candidate_list("q9", 3, 1))
    assert set(rec) == {"query_id", "query_image", "ground_truth_id", "candidates"}
    assert set(rec["candidates"][0]) == {"id", "image", "rank", "score"}
    assert [c["rank"] for c in rec["candidates"]] == [1, 2, 3]


# -- results ----------------------------------------------------------------------------------

_ids = st.lists(st.text("abcdefgh0123456789-", min_size=1, max_size=6), min_size=1, max_size=12, unique=True)


@st.composite
def results(draw):
    ids = draw(_ids)
    order = draw(st.permutations(ids))
    strategy = draw(st.sampled_from(list(StrategyId)))
    scores = None
    if strategy.is_pointwise and draw(st.booleans()):
        vals = st.one_of(st.none(), st.floats(allow_nan=False, allow_infinity=False))
        scores = {i: draw(vals) for i in order}
    calls = 0 if strategy.is_pointwise else draw(st.integers(0, 500))
    diag = Diagnostics(*(draw(st.integers(0, 50)) for _ in range(3)))
    return RerankResult(draw(st.text(min_size=1, max_size=8)), strategy, tuple(order), scores, calls, diag)


@settings(max_examples=150, deadline=None)
@given(st.lists(results(), max_size=5))
def test_results_round_trip(tmp_path_factory, rs):
    path = tmp_path_factory.mktemp("r") / "results.jsonl"
    save_results(rs, path)
    assert load_results(path) == rs


def test_refuses_non_permutation(tmp_path):
    dup = RerankResult("q", StrategyId.PAIRWISE, ("a", "b", "a"), None, 2)
    with pytest.raises(ValueError, match="duplicate"):
        save_results([dup], tmp_path / "r.jsonl")
    cl = make_candidate_list("q", 3, 1)
    wrong = RerankResult("q", StrategyId.PAIRWISE, ("q-gt", "q-n02", "zzz"), None, 2)
    with pytest.raises(ValueError, match="permutation"):
        save_results([wrong], tmp_path / "r.jsonl", {"q": cl})
    assert not (tmp_path / "r.jsonl").exists()


def test_500_results_stable_order(tmp_path):
    rs = [RerankResult(f"q{i:04d}", StrategyId.PAIRWISE, ("b", "a"), None, 1) for i in range(500)]
    path = tmp_path / "r.jsonl"
    save_results(rs, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 500
    assert [json.loads(line)["query_id"] for line in lines] == [r.query_id for r in rs]


def test_nan_scores_saved_as_null(tmp_path):
    r = RerankResult("q", StrategyId.YESNO, ("a", "b"), {"a": 0.5, "b": math.nan})
    path = tmp_path / "r.jsonl"
    save_results([r], path)
    assert json.loads(path.read_text())["scores"] == {"a": 0.5, "b": None}
