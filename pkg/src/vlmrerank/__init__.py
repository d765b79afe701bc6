"""Zero-shot VLM reranking of cross-view geolocalization candidates.

Pointwise (direct 0-100, Likert expectation, Yes/No, reasoning + Yes/No) and pairwise
(merge sort over a two-candidate preference judge) strategies, live HTTP or simulated
backends, and Recall@k / score-distribution evaluation.
"""

from .datamodel import (
    AerialCandidate,
    CandidateList,
    Diagnostics,
    GroundQuery,
    RerankResult,
    SchemaError,
    StrategyId,
    load_candidates,
    load_results,
    save_results,
    validate_candidate_list,
)
from .evaluation import EvalReport, class_stats, recall_at_k
from .pairwise import merge_sort_rerank, parse_preference
from .pointwise import expected_likert, parse_direct_score, rerank_pointwise, yes_probability

__version__ = "0.1.0"

__all__ = [
    "AerialCandidate",
    "CandidateList",
    "Diagnostics",
    "EvalReport",
    "GroundQuery",
    "RerankResult",
    "SchemaError",
    "StrategyId",
    "class_stats",
    "expected_likert",
    "load_candidates",
    "load_results",
    "merge_sort_rerank",
    "parse_direct_score",
    "parse_preference",
    "recall_at_k",
    "rerank_pointwise",
    "save_results",
    "validate_candidate_list",
    "yes_probability",
]
