"""Pairwise reranking: a two-candidate preference judge drives a top-down merge sort."""

from __future__ import annotations

import json
import logging
import math
import re
import time
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .datamodel import AerialCandidate, CandidateList, Diagnostics, GroundQuery, RerankResult, StrategyId
from .gateway import GatewayError, VlmGateway
from .prompts import PromptError, render_pairwise

log = logging.getLogger(__name__)

_OBJECT_RE = re.compile(r"\{[^{}]*\}")


class Slot(str, Enum):
    FIRST = "first"
    SECOND = "second"


class Source(str, Enum):
    MODEL = "model"
    FALLBACK_PARSE = "fallback_parse"
    FALLBACK_ERROR = "fallback_error"
    FALLBACK_SWAP = "fallback_swap"  # swap-consistency check disagreed

    @property
    def is_fallback(self) -> bool:
        return self is not Source.MODEL


class Unparseable(ValueError):
    pass


@dataclass(frozen=True)
class PreferenceOutcome:
    winner: Slot
    source: Source
    raw_text: str
    presented_pair: tuple[str, str]
    latency: float = 0.0
    from_cache: bool = False

    @property
    def winner_id(self) -> str:
        return self.presented_pair[0 if self.winner is Slot.FIRST else 1]


Comparator = Callable[[GroundQuery, AerialCandidate, AerialCandidate], PreferenceOutcome]


def _preference_value(obj: object) -> int | None:
    if not isinstance(obj, dict) or "preference" not in obj:
        return None
    value = obj["preference"]
    if isinstance(value, bool):
        return None
    if isinstance(value, str):
        value = value.strip()
    if value in ("1", 1):
        return 1
    if value in ("2", 2):
        return 2
    return None


def parse_preference(text: str) -> int:
    """Read ``{"preference": "1"|"2"}`` from a reply, strictly first, then from any embedded object."""
    try:
        strict = _preference_value(json.loads(text))
    except ValueError:
        strict = None
    if strict is not None:
        return strict
    for m in _OBJECT_RE.finditer(text):
        try:
            value = _preference_value(json.loads(m.group(0)))
        except ValueError:
            continue
        if value is not None:
            return value
    raise Unparseable(f"no preference object in {text[:80]!r}")


def prior_winner(first: AerialCandidate, second: AerialCandidate) -> Slot:
    """retrieval prior: the better (smaller) initial rank wins."""
    return Slot.FIRST if first.initial_rank <= second.initial_rank else Slot.SECOND


def compare(
    query: GroundQuery,
    first: AerialCandidate,
    second: AerialCandidate,
    gateway: VlmGateway,
    images_root: str | Path | None = None,
) -> PreferenceOutcome:
    pair = (first.id, second.id)
    message = render_pairwise(query, first, second, images_root)
    start = time.perf_counter()
    try:
        resp = gateway.cached_complete(message, want_logprobs=False)
    except (GatewayError, OSError) as exc:
        log.warning("query %s: comparison %s vs %s failed: %s", query.id, first.id, second.id, exc)
        return PreferenceOutcome(prior_winner(first, second), Source.FALLBACK_ERROR, "", pair, time.perf_counter() - start)
    latency = time.perf_counter() - start
    try:
        choice = parse_preference(resp.text)
    except Unparseable:
        return PreferenceOutcome(prior_winner(first, second), Source.FALLBACK_PARSE, resp.text, pair, latency, resp.from_cache)
    winner = Slot.FIRST if choice == 1 else Slot.SECOND
    return PreferenceOutcome(winner, Source.MODEL, resp.text, pair, latency, resp.from_cache)


class VlmComparator:
    """Comparator bound to a gateway; rendering faults degrade to the retrieval prior like backend faults."""

    def __init__(self, gateway: VlmGateway, images_root: str | Path | None = None):
        self.gateway = gateway
        self.images_root = images_root

    def __call__(self, query: GroundQuery, first: AerialCandidate, second: AerialCandidate) -> PreferenceOutcome:
        try:
            return compare(query, first, second, self.gateway, self.images_root)
        except PromptError as exc:
            log.warning("query %s: cannot render pair %s/%s: %s", query.id, first.id, second.id, exc)
            return PreferenceOutcome(prior_winner(first, second), Source.FALLBACK_ERROR, "", (first.id, second.id))


class SwapConsistent:
    """Ask twice with the slots swapped; keep the verdict only when both calls agree.

    Disagreement (or a fallback on either call) resolves to the retrieval prior. Each
    comparison counts as one logical call for the sorter, but costs two backend calls.
    """

    def __init__(self, inner: Comparator):
        self.inner = inner

    def __call__(self, query: GroundQuery, first: AerialCandidate, second: AerialCandidate) -> PreferenceOutcome:
        a = self.inner(query, first, second)
        b = self.inner(query, second, first)
        pair = (first.id, second.id)
        raw = f"{a.raw_text}\n---\n{b.raw_text}"
        latency = a.latency + b.latency
        cached = a.from_cache and b.from_cache
        if a.source.is_fallback or b.source.is_fallback:
            source = a.source if a.source.is_fallback else b.source
            return PreferenceOutcome(prior_winner(first, second), source, raw, pair, latency, cached)
        if a.winner_id != b.winner_id:
            return PreferenceOutcome(prior_winner(first, second), Source.FALLBACK_SWAP, raw, pair, latency, cached)
        return PreferenceOutcome(a.winner, Source.MODEL, raw, pair, latency, cached)


def max_comparisons(k: int) -> int:
    """Upper bound K * ceil(log2 K) on merge-sort comparisons (0 for K <= 1)."""
    return 0 if k <= 1 else k * math.ceil(math.log2(k))


def merge_sort_rerank(
    cl: CandidateList,
    comparator: Comparator,
    on_compare: Callable[[PreferenceOutcome], None] | None = None,
) -> RerankResult:
    """Order candidates by the comparator's preferences with a top-down merge sort.

    The list is split into its first ceil(n/2) elements and the rest. While merging, the
    fronts of both runs are compared with the left run's element in slot 1 and the winner
    is emitted next; once a run is exhausted the other is appended without further calls.
    """
    outcomes: list[PreferenceOutcome] = []

    def sort(items: list[AerialCandidate]) -> list[AerialCandidate]:
        if len(items) <= 1:
            return items
        mid = (len(items) + 1) // 2
        left, right = sort(items[:mid]), sort(items[mid:])
        merged: list[AerialCandidate] = []
        i = j = 0
        while i < len(left) and j < len(right):
            outcome = comparator(cl.query, left[i], right[j])
            outcomes.append(outcome)
            if on_compare is not None:
                on_compare(outcome)
            if outcome.winner is Slot.FIRST:
                merged.append(left[i])
                i += 1
            else:
                merged.append(right[j])
                j += 1
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged

    order = sort(list(cl.candidates))
    diag = Diagnostics(
        parse_failures=sum(o.source is Source.FALLBACK_PARSE for o in outcomes),
        fallbacks=sum(o.source.is_fallback for o in outcomes),
        cache_hits=sum(o.from_cache for o in outcomes),
    )
    return RerankResult(cl.query_id, StrategyId.PAIRWISE, tuple(c.id for c in order), None, len(outcomes), diag)


def audit_record(query_id: str, outcome: PreferenceOutcome) -> dict:
    return {
        "query_id": query_id,
        "first_id": outcome.presented_pair[0],
        "second_id": outcome.presented_pair[1],
        "winner": outcome.winner_id,
        "source": outcome.source.value,
        "latency_ms": round(outcome.latency * 1000.0, 3),
    }
