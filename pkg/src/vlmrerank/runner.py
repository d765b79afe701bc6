"""Rerank a whole dataset with a bounded worker pool; output order always follows the input."""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .datamodel import CandidateList, Diagnostics, RerankResult, StrategyId, check_permutation
from .pairwise import Comparator, PreferenceOutcome, audit_record, merge_sort_rerank
from .pointwise import Scorer, rerank_pointwise, score_dump_records, score_list


@dataclass
class RunOutput:
    results: list[RerankResult]
    score_rows: list[dict] = field(default_factory=list)
    audit_rows: list[dict] = field(default_factory=list)

    @property
    def total_calls(self) -> int:
        return sum(r.comparator_calls for r in self.results)

    @property
    def diagnostics(self) -> Diagnostics:
        return sum((r.diagnostics for r in self.results), Diagnostics())


def _pointwise_one(cl: CandidateList, scorer: Scorer) -> tuple[RerankResult, list[dict], list[dict]]:
    scores = score_list(cl, scorer)
    return rerank_pointwise(cl, scores), score_dump_records(cl, scores), []


def _pairwise_one(cl: CandidateList, comparator: Comparator) -> tuple[RerankResult, list[dict], list[dict]]:
    audit: list[dict] = []

    def record(outcome: PreferenceOutcome) -> None:
        audit.append(audit_record(cl.query_id, outcome))

    return merge_sort_rerank(cl, comparator, record), [], audit


def run_rerank(
    lists: Sequence[CandidateList],
    strategy: StrategyId | str,
    *,
    scorer: Scorer | None = None,
    comparator: Comparator | None = None,
    workers: int = 4,
) -> RunOutput:
    """Rerank every query. Queries run concurrently; candidates within one query run in sequence."""
    strategy = StrategyId(strategy)
    if strategy.is_pointwise:
        if scorer is None:
            raise ValueError(f"{strategy.value} needs a scorer")
        job = lambda cl: _pointwise_one(cl, scorer)  # noqa: E731
    else:
        if comparator is None:
            raise ValueError("pairwise needs a comparator")
        job = lambda cl: _pairwise_one(cl, comparator)  # noqa: E731

    if workers <= 1:
        parts = [job(cl) for cl in lists]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, lists))

    out = RunOutput([])
    for cl, (result, scores, audit) in zip(lists, parts):
        if result.strategy is not strategy:
            raise ValueError(f"query {cl.query_id!r}: scorer produced {result.strategy.value}, expected {strategy.value}")
        check_permutation(result, cl.ids)
        out.results.append(result)
        out.score_rows.extend(scores)
        out.audit_rows.extend(audit)
    return out
