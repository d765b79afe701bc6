import csv
import io
import json
import random
from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlmrerank.datamodel import Diagnostics, RerankResult, StrategyId, load_candidates
from vlmrerank.evaluation import (
    CSV_COLUMNS,
    EvalReport,
    baseline_results,
    class_stats,
    emit_report,
    histogram_svg,
    load_report,
    recall_at_k,
    report_csv,
    report_json,
    summary_json,
    sweep_csv,
    sweep_svg,
    truths_from,
)
from vlmrerank.simbackend import SweepRow


def _bundled(name):
    return resources.files("vlmrerank") / "data" / name


def test_bundled_fixture_baseline():
    lists = load_candidates(_bundled("baseline500.jsonl"))
    report = recall_at_k(baseline_results(lists), truths_from(lists))
    assert report.n_queries == 500
    assert [report.recall(k) for k in (1, 3, 5)] == pytest.approx([61.20, 73.80, 82.40], abs=0.01)
    assert report_csv(report).splitlines()[1].startswith("direct,61.20,73.80,82.40,500,")


def test_single_query_gt_at_four():
    r = RerankResult("q", StrategyId.PAIRWISE, ("a", "b", "c", "gt", "d"), None, 7)
    rep = recall_at_k([r], {"q": "gt"}, ks=(1, 3, 5))
    assert [rep.recall(k) for k in (1, 3, 5)] == [0.0, 0.0, 100.0]
    assert rep.mean_calls == 7 and rep.max_calls == 7


def test_absent_ground_truth_is_a_miss():
    rs = [RerankResult("q1", StrategyId.DIRECT, ("a", "b")), RerankResult("q2", StrategyId.DIRECT, ("c", "d"))]
    rep = recall_at_k(rs, {"q1": None, "q2": "c"}, ks=(1, 2))
    assert rep.recall(1) == 50.0 and rep.recall(2) == 50.0
    rep = recall_at_k(rs[:1], {"q1": "zzz"}, ks=(1, 20))
    assert rep.recall(20) == 0.0


def test_recall_errors():
    r = RerankResult("q", StrategyId.DIRECT, ("a",))
    with pytest.raises(ValueError):
        recall_at_k([r], {"q": "a"}, ks=(0,))
    with pytest.raises(KeyError):
        recall_at_k([r], {"other": "a"})
    assert recall_at_k([], {}).n_queries == 0


def test_recall_matches_brute_force():
    rng = random.Random(1234)
    results, truths = [], {}
    for i in range(1000):
        k = rng.randint(1, 25)
        ids = [f"c{j}" for j in range(k)]
        rng.shuffle(ids)
        qid = f"q{i}"
        truths[qid] = rng.choice(ids + [None, "elsewhere"])
        results.append(RerankResult(qid, StrategyId.YESNO, tuple(ids)))
    ks = (1, 3, 5, 10, 20)
    rep = recall_at_k(results, truths, ks)
    for k in ks:
        hits = sum(truths[r.query_id] in r.order[:k] for r in results)
        assert rep.recall(k) == pytest.approx(100.0 * hits / 1000, abs=1e-12)


@given(st.lists(st.tuples(st.permutations(list("abcdefgh")), st.sampled_from(list("abcdefgh") + [None])), min_size=1, max_size=30))
def test_recall_is_monotone_in_k(rows):
    results = [RerankResult(f"q{i}", StrategyId.PAIRWISE, tuple(order)) for i, (order, _) in enumerate(rows)]
    truths = {f"q{i}": gt for i, (_, gt) in enumerate(rows)}
    rep = recall_at_k(results, truths, range(1, 9))
    values = [rep.recall(k) for k in range(1, 9)]
    assert values == sorted(values)
    assert all(0.0 <= v <= 100.0 for v in values)


def test_report_round_trip(tmp_path):
    rep = recall_at_k([RerankResult("q", StrategyId.LIKERT, ("a", "b"), None, 0, Diagnostics(1, 2, 3))], {"q": "b"})
    emit_report(rep, tmp_path / "r.json")
    assert load_report(tmp_path / "r.json") == rep
    assert json.loads(report_json(rep))["per_k"][0] == {"k": 1, "hits": 0, "recall": 0.0}
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.x", fmt="xml")


def test_multi_row_csv():
    a = recall_at_k([RerankResult("q", StrategyId.YESNO, ("g", "x"))], {"q": "g"})
    b = recall_at_k([RerankResult("q", StrategyId.PAIRWISE, ("x", "g"), None, 1)], {"q": "g"})
    rows = list(csv.reader(io.StringIO(report_csv([("baseline", a), ("pairwise", b)]))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[1] == ["baseline", "100.00", "100.00", "100.00", "1", "0.00", "0", "0"]
    assert rows[2] == ["pairwise", "0.00", "100.00", "100.00", "1", "1.00", "1", "0"]


# -- score distributions --------------------------------------------------------------------


def test_class_stats_values():
    pairs = [(0.8, True), (0.9, True), (0.1, False), (0.3, False), (0.2, False), (0.2, False)]
    s = class_stats(pairs, (0.0, 1.0), "yesno")
    assert s.correct.count == 2 and s.incorrect.count == 4
    assert s.correct.mean == pytest.approx(0.85) and s.incorrect.mean == pytest.approx(0.2)
    assert s.correct.std == pytest.approx(0.05) and s.incorrect.std == pytest.approx(np.sqrt(0.005))
    assert s.overlap_coefficient == 0.0
    assert sum(s.correct.histogram) == pytest.approx(1.0)


def test_overlap_extremes():
    same = class_stats([(0.5, True), (0.5, False)], (0.0, 1.0))
    assert same.overlap_coefficient == pytest.approx(1.0)
    top = class_stats([(1.0, True), (1.0, False), (0.0, False)], (0.0, 1.0))
    assert top.correct.histogram[-1] == 1.0  # top edge falls in the last bin
    assert top.overlap_coefficient == pytest.approx(0.5)


@given(st.lists(st.tuples(st.floats(1, 5), st.booleans()), min_size=1, max_size=200))
def test_overlap_bounded_and_symmetric(pairs):
    s = class_stats(pairs, (1.0, 5.0))
    flipped = class_stats([(v, not g) for v, g in pairs], (1.0, 5.0))
    for c in (s.correct, s.incorrect):
        if c is not None:
            assert sum(c.histogram) == pytest.approx(1.0)
    if s.overlap_coefficient is None:
        assert s.correct is None or s.incorrect is None
    else:
        assert 0.0 <= s.overlap_coefficient <= 1.0
        assert s.overlap_coefficient == pytest.approx(flipped.overlap_coefficient)


def test_class_stats_errors():
    with pytest.raises(ValueError):
        class_stats([(1.5, True)], (0.0, 1.0))
    with pytest.raises(ValueError):
        class_stats([(float("nan"), True)], (0.0, 1.0))
    with pytest.raises(ValueError):
        class_stats([], (1.0, 1.0))
    empty = class_stats([(0.4, False)], (0.0, 1.0))
    assert empty.correct is None and empty.overlap_coefficient is None
    assert json.loads(summary_json(empty))["correct"] is None


def test_histogram_svg_is_deterministic():
    s = class_stats([(0.8, True), (0.3, False), (0.35, False)], (0.0, 1.0), "yesno")
    a, b = histogram_svg(s), histogram_svg(s)
    assert a == b and a.startswith("<svg") and a.rstrip().endswith("</svg>")
    assert "overlap 0.000" in a


def test_sweep_tables():
    rows = [SweepRow(0.0, {1: 100.0, 3: 100.0}, 48.5, 10, 2), SweepRow(0.5, {1: 5.0, 3: 20.0}, 60.0, 10, 2)]
    lines = sweep_csv(rows).splitlines()
    assert lines == ["p,R@1,R@3,mean_calls,trials,n_queries", "0,100.00,100.00,48.50,10,2", "0.5,5.00,20.00,60.00,10,2"]
    assert sweep_svg(rows) == sweep_svg(rows)
