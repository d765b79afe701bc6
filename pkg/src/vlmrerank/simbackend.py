"""Deterministic stand-ins for the VLM: a noisy oracle comparator and class-conditional synthetic scorers.

Every random draw is a pure function of (seed, identifiers) via a keyed hash, so results do
not depend on call order, repetition or worker count.
"""

from __future__ import annotations

import hashlib
import random
import threading
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from statistics import NormalDist

from .datamodel import AerialCandidate, CandidateList, GroundQuery, StrategyId
from .pairwise import PreferenceOutcome, Slot, Source, merge_sort_rerank
from .pointwise import PointwiseScore

_STD_NORMAL = NormalDist()


def stable_uniform(seed: int, *parts: object) -> float:
    """Uniform draw in (0, 1) keyed on ``seed`` and ``parts``."""
    h = hashlib.blake2b(str(seed).encode("utf-8"), digest_size=8)
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return (int.from_bytes(h.digest(), "big") + 0.5) / 2.0**64


def derive_seed(seed: int, *parts: object) -> int:
    h = hashlib.blake2b(str(seed).encode("utf-8"), digest_size=8, person=b"derive")
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "big")


# -- oracle comparator ----------------------------------------------------------------------


@dataclass(frozen=True)
class OracleConfig:
    flip_probability: float = 0.0
    seed: int = 0
    per_call_noise: bool = False

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0, 1], got {self.flip_probability}")


def true_winner(a: AerialCandidate, b: AerialCandidate, ground_truth_id: str | None) -> AerialCandidate:
    """Ground truth beats everything; otherwise the smaller initial rank wins."""
    if a.id == ground_truth_id:
        return a
    if b.id == ground_truth_id:
        return b
    return a if a.initial_rank <= b.initial_rank else b


def oracle_compare(
    query: GroundQuery,
    a: AerialCandidate,
    b: AerialCandidate,
    cfg: OracleConfig,
    ground_truth_id: str | None,
    call_index: int | None = None,
) -> PreferenceOutcome:
    """True preference, flipped with probability p.

    The flip is keyed on the unordered pair, so (a, b) and (b, a) agree. With
    ``call_index`` (per-call noise) each call draws independently.
    """
    winner = true_winner(a, b, ground_truth_id)
    p = cfg.flip_probability
    if p > 0.0:
        lo, hi = sorted((a.id, b.id))
        key = (query.id, lo, hi) if call_index is None else (query.id, lo, hi, call_index)
        if stable_uniform(cfg.seed, "flip", *key) < p:
            winner = b if winner is a else a
    slot = Slot.FIRST if winner is a else Slot.SECOND
    return PreferenceOutcome(slot, Source.MODEL, "", (a.id, b.id))


class OracleComparator:
    def __init__(self, cfg: OracleConfig, truths: Mapping[str, str | None]):
        self.cfg = cfg
        self.truths = truths
        self._calls: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def __call__(self, query: GroundQuery, a: AerialCandidate, b: AerialCandidate) -> PreferenceOutcome:
        call_index = None
        if self.cfg.per_call_noise:
            # one query is always sorted sequentially, so this index is schedule-independent
            with self._lock:
                call_index = self._calls[query.id]
                self._calls[query.id] += 1
        return oracle_compare(query, a, b, self.cfg, self.truths.get(query.id), call_index)


# -- synthetic pointwise scores -------------------------------------------------------------

SCORE_RANGES: dict[StrategyId, tuple[float, float]] = {
    StrategyId.DIRECT: (0.0, 100.0),
    StrategyId.LIKERT: (1.0, 5.0),
    StrategyId.YESNO: (0.0, 1.0),
    StrategyId.REASON_YESNO: (0.0, 1.0),
}

# (mean correct, sd correct, mean incorrect, sd incorrect) in units of the strategy's range
REGIMES: dict[str, tuple[float, float, float, float]] = {
    "constant": (0.9, 0.0, 0.9, 0.0),  # no discrimination: every candidate gets the same score
    "separated": (0.9, 0.01, 0.1, 0.01),
    "overlapping": (0.7, 0.3, 0.5, 0.3),  # signal present but swamped by variance
}


@dataclass(frozen=True)
class SyntheticScoreConfig:
    strategy: StrategyId = StrategyId.YESNO
    mean_correct: float = 0.9
    std_correct: float = 0.0
    mean_incorrect: float = 0.9
    std_incorrect: float = 0.0
    seed: int = 0
    regime: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "strategy", StrategyId(self.strategy))
        if not self.strategy.is_pointwise:
            raise ValueError("synthetic scores emulate pointwise strategies only")
        if self.std_correct < 0 or self.std_incorrect < 0:
            raise ValueError("standard deviations must be >= 0")

    @property
    def value_range(self) -> tuple[float, float]:
        return SCORE_RANGES[self.strategy]

    @classmethod
    def preset(cls, regime: str, strategy: StrategyId | str = StrategyId.YESNO, seed: int = 0) -> SyntheticScoreConfig:
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}; choose from {sorted(REGIMES)}")
        strategy = StrategyId(strategy)
        lo, hi = SCORE_RANGES[strategy]
        span = hi - lo
        mc, sc, mi, si = REGIMES[regime]
        return cls(strategy, lo + mc * span, sc * span, lo + mi * span, si * span, seed, regime)


def synthetic_pointwise(
    query_id: str, candidate: AerialCandidate, is_ground_truth: bool, cfg: SyntheticScoreConfig
) -> PointwiseScore:
    """Class-conditional normal draw, clamped to the strategy's range (rounded for direct scores)."""
    mean, std = (cfg.mean_correct, cfg.std_correct) if is_ground_truth else (cfg.mean_incorrect, cfg.std_incorrect)
    value = mean
    if std > 0.0:
        value += std * _STD_NORMAL.inv_cdf(stable_uniform(cfg.seed, "score", query_id, candidate.id))
    lo, hi = cfg.value_range
    value = min(max(value, lo), hi)
    if cfg.strategy is StrategyId.DIRECT:
        value = float(round(value))
    return PointwiseScore(candidate.id, cfg.strategy, value, True)


class SyntheticScorer:
    def __init__(self, cfg: SyntheticScoreConfig, truths: Mapping[str, str | None]):
        self.cfg = cfg
        self.truths = truths

    def __call__(self, query: GroundQuery, candidate: AerialCandidate) -> PointwiseScore:
        return synthetic_pointwise(query.id, candidate, candidate.id == self.truths.get(query.id), self.cfg)


# -- synthetic datasets ---------------------------------------------------------------------


def make_candidate_list(query_id: str, k: int, gt_rank: int | None) -> CandidateList:
    """K candidates with ranks 1..K; the ground truth sits at ``gt_rank`` (None: not retrieved)."""
    if gt_rank is not None and not 1 <= gt_rank <= k:
        raise ValueError(f"gt_rank {gt_rank} outside 1..{k}")
    cands = []
    for rank in range(1, k + 1):
        cid = f"{query_id}-gt" if rank == gt_rank else f"{query_id}-n{rank:02d}"
        score = round(0.9 - 0.01 * (rank - 1), 4)
        cands.append(AerialCandidate(cid, f"aerial/{cid}.png", rank, score))
    return CandidateList(GroundQuery(query_id, f"ground/{query_id}.jpg"), tuple(cands), f"{query_id}-gt", k)


def synthesize_dataset(
    n_queries: int, k: int = 20, seed: int = 0, gt_ranks: Sequence[int | None] | None = None
) -> list[CandidateList]:
    """Synthetic candidate lists; ground-truth ranks are uniform on 1..K unless given explicitly."""
    if gt_ranks is None:
        rng = random.Random(derive_seed(seed, "gt-ranks", n_queries, k))
        gt_ranks = [rng.randint(1, k) for _ in range(n_queries)]
    if len(gt_ranks) != n_queries:
        raise ValueError("gt_ranks length must equal n_queries")
    return [make_candidate_list(f"q{i:05d}", k, r) for i, r in enumerate(gt_ranks)]


def baseline_fixture(
    n_queries: int = 500,
    k: int = 20,
    hits: Mapping[int, int] | None = None,
    n_absent: int = 30,
    seed: int = 0,
) -> list[CandidateList]:
    """Dataset whose initial ranking has prescribed cumulative ground-truth hit counts.

    ``hits`` maps cutoff -> number of queries with the ground truth at rank <= cutoff;
    the default (306 / 369 / 412 at 1 / 3 / 5 of 500) gives 61.20 / 73.80 / 82.40 percent.
    Of the rest, ``n_absent`` have no ground truth in the list and the others sit in (5, K].
    """
    hits = dict(hits or {1: 306, 3: 369, 5: 412})
    rng = random.Random(derive_seed(seed, "baseline-fixture"))
    ranks: list[int | None] = []
    prev_cut, prev_count = 0, 0
    for cut in sorted(hits):
        count = hits[cut] - prev_count
        if count < 0 or cut > k:
            raise ValueError("hit counts must be non-decreasing with cutoffs <= K")
        ranks += [rng.randint(prev_cut + 1, cut) for _ in range(count)]
        prev_cut, prev_count = cut, hits[cut]
    rest = n_queries - prev_count - n_absent
    if rest < 0 or (rest > 0 and prev_cut >= k):
        raise ValueError("hit counts and n_absent do not fit n_queries")
    ranks += [rng.randint(prev_cut + 1, k) for _ in range(rest)]
    ranks += [None] * n_absent
    rng.shuffle(ranks)
    return synthesize_dataset(n_queries, k, seed, ranks)


# -- noise sweep ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    p: float
    recall: dict[int, float]  # k -> mean Recall@k in percent
    mean_calls: float
    trials: int
    n_queries: int


def run_noise_sweep(
    dataset: Sequence[CandidateList],
    p_grid: Sequence[float],
    trials: int,
    seed: int = 0,
    ks: Sequence[int] = (1, 3, 5),
    per_call_noise: bool = False,
) -> list[SweepRow]:
    """Merge-sort rerank ``dataset`` with an oracle flipping at each p, averaged over ``trials`` seeds.

    Trial t uses the same derived oracle seed at every p, so the sweep uses common random numbers.
    """
    if not p_grid:
        raise ValueError("p_grid must be non-empty")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not dataset:
        raise ValueError("dataset is empty")
    for p in p_grid:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"flip probability {p} outside [0, 1]")
    missing = [cl.query_id for cl in dataset if not cl.gt_present]
    if missing:
        raise ValueError(f"ground truth absent from candidates for {len(missing)} queries (e.g. {missing[0]})")
    truths = {cl.query_id: cl.ground_truth_id for cl in dataset}
    rows = []
    for p in p_grid:
        hit_counts = {k: 0 for k in ks}
        calls = 0
        for t in range(trials):
            cmp = OracleComparator(OracleConfig(p, derive_seed(seed, "trial", t), per_call_noise), truths)
            for cl in dataset:
                result = merge_sort_rerank(cl, cmp)
                calls += result.comparator_calls
                pos = result.order.index(cl.ground_truth_id) + 1
                for k in ks:
                    hit_counts[k] += pos <= k
        runs = trials * len(dataset)
        rows.append(SweepRow(p, {k: 100.0 * hit_counts[k] / runs for k in ks}, calls / runs, trials, len(dataset)))
    return rows
