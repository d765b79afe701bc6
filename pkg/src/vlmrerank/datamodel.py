"""Records for queries, candidate lists and rerank results, plus their line-delimited file formats.

Candidate-list file (UTF-8, one JSON object per line)::

    {"query_id": "q0001",
     "query_image": "ground/q0001.jpg",
     "ground_truth_id": "s0042",          # or null
     "candidates": [{"id": "s0042", "image": "aerial/s0042.png", "rank": 1, "score": 0.83},
                    ...]}                 # sorted by rank, ranks exactly 1..K

Results file (UTF-8, one JSON object per line)::

    {"query_id": "q0001", "strategy": "pairwise", "order": ["s0042", ...],
     "scores": null | {"s0042": 0.91, "s0007": null, ...},
     "comparator_calls": 61,
     "diagnostics": {"parse_failures": 0, "fallbacks": 0, "cache_hits": 0}}
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class StrategyId(str, Enum):
    DIRECT = "direct"
    LIKERT = "likert"
    YESNO = "yesno"
    REASON_YESNO = "reason_yesno"
    PAIRWISE = "pairwise"

    @property
    def is_pointwise(self) -> bool:
        return self is not StrategyId.PAIRWISE

    @property
    def uses_logprobs(self) -> bool:
        return self in (StrategyId.LIKERT, StrategyId.YESNO, StrategyId.REASON_YESNO)


POINTWISE_STRATEGIES = tuple(s for s in StrategyId if s.is_pointwise)


class SchemaError(ValueError):
    """A record in a candidate or results file does not match the documented schema."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class GroundQuery:
    id: str
    image_ref: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("GroundQuery.id must be non-empty")
        if not self.image_ref:
            raise ValueError(f"query {self.id!r}: image_ref must be non-empty")


@dataclass(frozen=True)
class AerialCandidate:
    id: str
    image_ref: str
    initial_rank: int
    retrieval_score: float | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("AerialCandidate.id must be non-empty")
        if self.initial_rank < 1:
            raise ValueError(f"candidate {self.id!r}: initial_rank must be >= 1, got {self.initial_rank}")


@dataclass(frozen=True)
class CandidateList:
    """One ground query with its retrieval top-K aerial candidates (the initial ranking).

    Invariants are not enforced here; :func:`validate_candidate_list` reports them.
    """

    query: GroundQuery
    candidates: tuple[AerialCandidate, ...]
    ground_truth_id: str | None = None
    k: int = -1

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.k == -1:
            object.__setattr__(self, "k", len(self.candidates))

    @property
    def query_id(self) -> str:
        return self.query.id

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.candidates)

    def by_id(self) -> dict[str, AerialCandidate]:
        return {c.id: c for c in self.candidates}

    @property
    def gt_present(self) -> bool:
        return self.ground_truth_id is not None and self.ground_truth_id in self.ids


@dataclass(frozen=True)
class Diagnostics:
    parse_failures: int = 0
    fallbacks: int = 0
    cache_hits: int = 0

    def __add__(self, other: Diagnostics) -> Diagnostics:
        return Diagnostics(
            self.parse_failures + other.parse_failures,
            self.fallbacks + other.fallbacks,
            self.cache_hits + other.cache_hits,
        )

    def to_dict(self) -> dict[str, int]:
        return {"parse_failures": self.parse_failures, "fallbacks": self.fallbacks, "cache_hits": self.cache_hits}


@dataclass(frozen=True)
class RerankResult:
    query_id: str
    strategy: StrategyId
    order: tuple[str, ...]
    scores: Mapping[str, float | None] | None = None
    comparator_calls: int = 0
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        object.__setattr__(self, "strategy", StrategyId(self.strategy))
        if self.comparator_calls < 0:
            raise ValueError("comparator_calls must be >= 0")
        if self.strategy.is_pointwise and self.comparator_calls != 0:
            raise ValueError("pointwise results must report comparator_calls == 0")

    def rank_of(self, candidate_id: str) -> int | None:
        """1-based position of ``candidate_id`` in the reranked order, or None."""
        try:
            return self.order.index(candidate_id) + 1
        except ValueError:
            return None


@dataclass(frozen=True)
class ValidationReport:
    query_id: str
    violations: tuple[str, ...] = ()
    gt_absent: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_candidate_list(cl: CandidateList) -> ValidationReport:
    violations: list[str] = []
    n = len(cl.candidates)
    if cl.k != n:
        violations.append(f"length mismatch: k={cl.k} but {n} candidates")
    seen: set[str] = set()
    for c in cl.candidates:
        if c.id in seen:
            violations.append(f"duplicate candidate id {c.id!r}")
        seen.add(c.id)
    for expected, c in enumerate(cl.candidates, start=1):
        if c.initial_rank != expected:
            violations.append(
                f"non-contiguous ranks: candidate {c.id!r} has rank {c.initial_rank}, expected {expected}"
            )
            break
    gt_absent = cl.ground_truth_id is not None and cl.ground_truth_id not in seen
    return ValidationReport(cl.query.id, tuple(violations), gt_absent)


def check_permutation(result: RerankResult, candidate_ids: Iterable[str] | None = None) -> None:
    """Raise ValueError unless ``result.order`` is a permutation (of ``candidate_ids`` if given)."""
    order = result.order
    if len(set(order)) != len(order):
        raise ValueError(f"query {result.query_id!r}: order contains duplicate ids")
    if candidate_ids is not None and sorted(order) != sorted(candidate_ids):
        raise ValueError(f"query {result.query_id!r}: order is not a permutation of the input candidates")
    if result.scores is not None and set(result.scores) != set(order):
        raise ValueError(f"query {result.query_id!r}: scores keys do not match order ids")


# -- candidate-list files ---------------------------------------------------------------------


def _require(obj: Mapping, key: str, kind, line: int, *, nullable: bool = False):
    if key not in obj:
        raise SchemaError("missing", line=line, field=key)
    value = obj[key]
    if value is None and nullable:
        return None
    # bool is an int subclass; never accept it for numeric fields
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}", line=line, field=key)
    return value


def parse_candidate_record(obj: object, line: int = 0) -> CandidateList:
    """Build a CandidateList from one decoded JSON record, checking field types only."""
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", line=line)
    qid = _require(obj, "query_id", str, line)
    qimg = _require(obj, "query_image", str, line)
    gt = _require(obj, "ground_truth_id", str, line, nullable=True)
    raw = _require(obj, "candidates", list, line)
    cands = []
    for i, c in enumerate(raw):
        prefix = f"candidates[{i}]"
        if not isinstance(c, dict):
            raise SchemaError("expected object", line=line, field=prefix)
        for key, kind in (("id", str), ("image", str), ("rank", int)):
            if key not in c:
                raise SchemaError("missing", line=line, field=f"{prefix}.{key}")
            if not isinstance(c[key], kind) or isinstance(c[key], bool):
                raise SchemaError(f"expected {kind.__name__}", line=line, field=f"{prefix}.{key}")
        score = c.get("score")
        if score is not None and (not isinstance(score, (int, float)) or isinstance(score, bool)):
            raise SchemaError("expected number or null", line=line, field=f"{prefix}.score")
        try:
            cands.append(AerialCandidate(c["id"], c["image"], c["rank"], None if score is None else float(score)))
        except ValueError as exc:
            raise SchemaError(str(exc), line=line, field=prefix) from None
    try:
        query = GroundQuery(qid, qimg)
    except ValueError as exc:
        raise SchemaError(str(exc), line=line) from None
    return CandidateList(query, tuple(cands), gt, len(cands))


def iter_candidate_lines(path: str | os.PathLike) -> Iterator[tuple[int, CandidateList]]:
    """Yield ``(line_number, CandidateList)`` per non-blank line; raises SchemaError on malformed records."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", line=lineno) from None
            yield lineno, parse_candidate_record(obj, lineno)


def load_candidates(path: str | os.PathLike) -> list[CandidateList]:
    """Read a candidate-list file, rejecting any record that breaks a CandidateList invariant."""
    out = []
    seen_queries: set[str] = set()
    for lineno, cl in iter_candidate_lines(path):
        report = validate_candidate_list(cl)
        if not report.ok:
            raise SchemaError(f"query {cl.query_id!r}: {report.violations[0]}", line=lineno, field="candidates")
        if cl.query_id in seen_queries:
            raise SchemaError(f"duplicate query id {cl.query_id!r}", line=lineno, field="query_id")
        seen_queries.add(cl.query_id)
        out.append(cl)
    return out


def candidate_record(cl: CandidateList) -> dict:
    return {
        "query_id": cl.query.id,
        "query_image": cl.query.image_ref,
        "ground_truth_id": cl.ground_truth_id,
        "candidates": [
            {"id": c.id, "image": c.image_ref, "rank": c.initial_rank, "score": c.retrieval_score}
            for c in cl.candidates
        ],
    }


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, allow_nan=False) + "\n" for r in records)


def save_candidates(lists: Sequence[CandidateList], path: str | os.PathLike) -> None:
    for cl in lists:
        report = validate_candidate_list(cl)
        if not report.ok:
            raise ValueError(f"query {cl.query_id!r}: {'; '.join(report.violations)}")
    atomic_write_text(path, _jsonl(candidate_record(cl) for cl in lists))


# -- results files ----------------------------------------------------------------------------


def result_record(r: RerankResult) -> dict:
    scores = None
    if r.scores is not None:
        scores = {}
        for cid in r.order:
            v = r.scores[cid]
            scores[cid] = None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
    return {
        "query_id": r.query_id,
        "strategy": r.strategy.value,
        "order": list(r.order),
        "scores": scores,
        "comparator_calls": r.comparator_calls,
        "diagnostics": r.diagnostics.to_dict(),
    }


def parse_result_record(obj: object, line: int = 0) -> RerankResult:
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", line=line)
    qid = _require(obj, "query_id", str, line)
    strategy = _require(obj, "strategy", str, line)
    order = _require(obj, "order", list, line)
    if not all(isinstance(x, str) for x in order):
        raise SchemaError("expected list of strings", line=line, field="order")
    scores = _require(obj, "scores", dict, line, nullable=True)
    if scores is not None:
        for k, v in scores.items():
            if v is not None and (not isinstance(v, (int, float)) or isinstance(v, bool)):
                raise SchemaError(f"score for {k!r} must be a number or null", line=line, field="scores")
        scores = {k: (None if v is None else float(v)) for k, v in scores.items()}
    calls = _require(obj, "comparator_calls", int, line)
    diag = _require(obj, "diagnostics", dict, line)
    try:
        diagnostics = Diagnostics(**{k: int(diag[k]) for k in ("parse_failures", "fallbacks", "cache_hits")})
    except (KeyError, TypeError, ValueError):
        raise SchemaError("expected parse_failures, fallbacks, cache_hits", line=line, field="diagnostics") from None
    try:
        result = RerankResult(qid, StrategyId(strategy), tuple(order), scores, calls, diagnostics)
        check_permutation(result)
    except ValueError as exc:
        raise SchemaError(str(exc), line=line) from None
    return result


def save_results(
    results: Sequence[RerankResult],
    path: str | os.PathLike,
    candidates: Mapping[str, CandidateList] | None = None,
) -> None:
    """Write results as JSONL (atomically). Refuses any result whose order is not a permutation.

    When ``candidates`` (query id -> CandidateList) is given, each order is checked against the
    exact input id set; otherwise only duplicate ids and score/order key agreement are checked.
    """
    for r in results:
        ids = candidates[r.query_id].ids if candidates is not None else None
        check_permutation(r, ids)
    atomic_write_text(path, _jsonl(result_record(r) for r in results))


def load_results(path: str | os.PathLike) -> list[RerankResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", line=lineno) from None
            out.append(parse_result_record(obj, lineno))
    return out
