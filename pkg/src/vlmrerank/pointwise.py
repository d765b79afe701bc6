"""Pointwise reranking: score each candidate against the query on its own, then sort by score."""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .datamodel import AerialCandidate, CandidateList, Diagnostics, GroundQuery, RerankResult, StrategyId
from .gateway import GatewayError, VlmGateway, VlmResponse, extract_token_probs
from .prompts import PromptError, render_pointwise, render_reason_followup

log = logging.getLogger(__name__)

LIKERT_LABELS = ("1", "2", "3", "4", "5")
YESNO_LABELS = ("Yes", "No")

# an integer not glued to a sign, a word or a decimal point
_INT_RE = re.compile(r"(?<![\w.\-])(\d+)(?!\w|\.\d)")


class NoScoreFound(ValueError):
    pass


class AllZeroMass(ValueError):
    pass


@dataclass(frozen=True)
class PointwiseScore:
    candidate_id: str
    strategy: StrategyId
    value: float
    valid: bool = True
    raw: VlmResponse | None = None
    error: str | None = None  # "parse" or "backend" when invalid

    def __post_init__(self):
        if not self.valid:
            object.__setattr__(self, "value", math.nan)


def invalid_score(candidate_id: str, strategy: StrategyId, error: str, raw: VlmResponse | None = None) -> PointwiseScore:
    return PointwiseScore(candidate_id, strategy, math.nan, False, raw, error)


def parse_direct_score(text: str) -> int:
    """First integer literal in ``text`` that lies in 0..100."""
    for m in _INT_RE.finditer(text):
        value = int(m.group(1))
        if 0 <= value <= 100:
            return value
    raise NoScoreFound(f"no integer in [0, 100] in {text[:80]!r}")


def expected_likert(dist: Mapping[str, float]) -> float:
    """Expected 1..5 rating, renormalized over the five digit labels."""
    probs = [float(dist[label]) if label in dist else 0.0 for label in LIKERT_LABELS]
    total = sum(probs)
    if total <= 0.0:
        raise AllZeroMass("no probability on any of '1'..'5'")
    return sum(k * p for k, p in enumerate(probs, start=1)) / total


def yes_probability(dist: Mapping[str, float]) -> float:
    p_yes = float(dist["Yes"]) if "Yes" in dist else 0.0
    p_no = float(dist["No"]) if "No" in dist else 0.0
    if p_yes + p_no <= 0.0:
        raise AllZeroMass("no probability on 'Yes' or 'No'")
    return p_yes / (p_yes + p_no)


# -- VLM-backed scorers ---------------------------------------------------------------------

Scorer = Callable[[GroundQuery, AerialCandidate], PointwiseScore]


class VlmScorer:
    """Scores one candidate with a VLM under one pointwise strategy.

    Backend and prompt faults become invalid scores; they never propagate to the caller.
    """

    def __init__(self, strategy: StrategyId | str, gateway: VlmGateway, images_root: str | Path | None = None):
        self.strategy = StrategyId(strategy)
        if not self.strategy.is_pointwise:
            raise ValueError(f"{self.strategy.value} is not a pointwise strategy")
        self.gateway = gateway
        self.images_root = images_root

    def __call__(self, query: GroundQuery, candidate: AerialCandidate) -> PointwiseScore:
        try:
            return self._score(query, candidate)
        except (GatewayError, PromptError, OSError) as exc:
            log.warning("query %s candidate %s: backend failure: %s", query.id, candidate.id, exc)
            return invalid_score(candidate.id, self.strategy, "backend")

    def _score(self, query: GroundQuery, candidate: AerialCandidate) -> PointwiseScore:
        if self.strategy is StrategyId.REASON_YESNO:
            return score_reason_yesno(query, candidate, self.gateway, self.images_root)
        message = render_pointwise(self.strategy, query, candidate, self.images_root)
        gw = self.gateway
        if self.strategy is StrategyId.DIRECT:
            resp = gw.cached_complete(message, want_logprobs=False)
            try:
                return PointwiseScore(candidate.id, self.strategy, float(parse_direct_score(resp.text)), True, resp)
            except NoScoreFound:
                return invalid_score(candidate.id, self.strategy, "parse", resp)
        resp = gw.cached_complete(message, want_logprobs=True)
        try:
            if self.strategy is StrategyId.LIKERT:
                value = expected_likert(extract_token_probs(resp, LIKERT_LABELS).probs)
            else:
                value = yes_probability(extract_token_probs(resp, YESNO_LABELS).probs)
        except AllZeroMass:
            return invalid_score(candidate.id, self.strategy, "parse", resp)
        return PointwiseScore(candidate.id, self.strategy, value, True, resp)


def score_reason_yesno(
    query: GroundQuery, candidate: AerialCandidate, gateway: VlmGateway, images_root: str | Path | None = None
) -> PointwiseScore:
    """Two turns: free-form reasoning, then a bare Yes/No whose token probabilities give the score."""
    first = render_pointwise(StrategyId.REASON_YESNO, query, candidate, images_root)
    reasoning = gateway.cached_complete(first, want_logprobs=False)
    answer = gateway.cached_complete(render_reason_followup(first, reasoning.text), want_logprobs=True)
    try:
        value = yes_probability(extract_token_probs(answer, YESNO_LABELS).probs)
    except AllZeroMass:
        return invalid_score(candidate.id, StrategyId.REASON_YESNO, "parse", answer)
    return PointwiseScore(candidate.id, StrategyId.REASON_YESNO, value, True, answer)


def _from_cache(score: PointwiseScore) -> int:
    return int(score.raw is not None and score.raw.from_cache)


# -- reranking ------------------------------------------------------------------------------


def rerank_pointwise(
    cl: CandidateList,
    scores: Mapping[str, PointwiseScore] | Sequence[PointwiseScore],
    cache_hits: int | None = None,
) -> RerankResult:
    """Sort by score descending, ties by initial rank; invalid scores go last in initial order."""
    if not isinstance(scores, Mapping):
        scores = {s.candidate_id: s for s in scores}
    missing = [c.id for c in cl.candidates if c.id not in scores]
    if missing:
        raise KeyError(f"query {cl.query_id!r}: no score for candidates {missing}")
    strategies = {scores[c.id].strategy for c in cl.candidates}
    if len(strategies) > 1:
        raise ValueError(f"query {cl.query_id!r}: mixed strategies {sorted(s.value for s in strategies)}")
    strategy = strategies.pop() if strategies else StrategyId.DIRECT

    def key(c: AerialCandidate):
        s = scores[c.id]
        if s.valid:
            return (0, -s.value, c.initial_rank)
        return (1, 0.0, c.initial_rank)

    ordered = sorted(cl.candidates, key=key)
    invalid = [scores[c.id] for c in cl.candidates if not scores[c.id].valid]
    diag = Diagnostics(
        parse_failures=sum(s.error == "parse" for s in invalid),
        fallbacks=len(invalid),
        cache_hits=sum(_from_cache(scores[c.id]) for c in cl.candidates) if cache_hits is None else cache_hits,
    )
    return RerankResult(
        cl.query_id,
        strategy,
        tuple(c.id for c in ordered),
        {c.id: (scores[c.id].value if scores[c.id].valid else None) for c in ordered},
        0,
        diag,
    )


def score_list(cl: CandidateList, scorer: Scorer, workers: int = 1) -> list[PointwiseScore]:
    """Score every candidate; the returned list follows the input order regardless of completion order."""
    if workers <= 1 or len(cl.candidates) <= 1:
        return [scorer(cl.query, c) for c in cl.candidates]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: scorer(cl.query, c), cl.candidates))


def score_dump_records(cl: CandidateList, scores: Sequence[PointwiseScore]) -> list[dict]:
    """Rows for the per-candidate score dump consumed by the distribution analysis."""
    rows = []
    for s in scores:
        rows.append(
            {
                "query_id": cl.query_id,
                "candidate_id": s.candidate_id,
                "strategy": s.strategy.value,
                "value": s.value if s.valid else None,
                "valid": s.valid,
                "is_ground_truth": s.candidate_id == cl.ground_truth_id,
            }
        )
    return rows
