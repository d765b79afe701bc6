"""Recall@k, score-distribution statistics, and report emission (JSON, CSV, static SVG)."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from html import escape

import numpy as np

from .datamodel import CandidateList, Diagnostics, RerankResult, StrategyId, atomic_write_text

N_BINS = 20
DEFAULT_KS = (1, 3, 5)
CSV_COLUMNS = ("strategy", "R@1", "R@3", "R@5", "n", "mean_calls", "max_calls", "parse_failures")


@dataclass(frozen=True)
class RecallAtK:
    k: int
    hits: int
    recall: float  # percent


@dataclass(frozen=True)
class EvalReport:
    strategy: str
    n_queries: int
    per_k: tuple[RecallAtK, ...]
    mean_calls: float = 0.0
    max_calls: int = 0
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    def recall(self, k: int) -> float:
        for row in self.per_k:
            if row.k == k:
                return row.recall
        raise KeyError(k)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_queries": self.n_queries,
            "per_k": [{"k": r.k, "hits": r.hits, "recall": r.recall} for r in self.per_k],
            "mean_calls": self.mean_calls,
            "max_calls": self.max_calls,
            "diagnostics": self.diagnostics.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> EvalReport:
        return cls(
            obj["strategy"],
            int(obj["n_queries"]),
            tuple(RecallAtK(int(r["k"]), int(r["hits"]), float(r["recall"])) for r in obj["per_k"]),
            float(obj["mean_calls"]),
            int(obj["max_calls"]),
            Diagnostics(**obj["diagnostics"]),
        )


def truths_from(lists: Iterable[CandidateList]) -> dict[str, str | None]:
    return {cl.query_id: cl.ground_truth_id for cl in lists}


def recall_at_k(
    results: Sequence[RerankResult],
    truths: Mapping[str, str | None],
    ks: Iterable[int] = DEFAULT_KS,
    strategy: str | None = None,
) -> EvalReport:
    """A query is a hit at k iff its ground truth sits at position <= k; absent ground truth never hits."""
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise ValueError(f"every k must be >= 1, got {ks}")
    missing = [r.query_id for r in results if r.query_id not in truths]
    if missing:
        raise KeyError(f"no ground-truth entry for {len(missing)} queries, e.g. {missing[0]!r}")
    if strategy is None:
        labels = {r.strategy.value for r in results}
        strategy = labels.pop() if len(labels) == 1 else "mixed"
    hits = dict.fromkeys(ks, 0)
    for r in results:
        gt = truths[r.query_id]
        pos = r.rank_of(gt) if gt is not None else None
        if pos is None:
            continue
        for k in ks:
            if pos <= k:
                hits[k] += 1
    n = len(results)
    calls = [r.comparator_calls for r in results]
    return EvalReport(
        strategy,
        n,
        tuple(RecallAtK(k, hits[k], 100.0 * hits[k] / n if n else 0.0) for k in ks),
        sum(calls) / n if n else 0.0,
        max(calls, default=0),
        sum((r.diagnostics for r in results), Diagnostics()),
    )


def baseline_results(lists: Iterable[CandidateList], strategy: StrategyId = StrategyId.DIRECT) -> list[RerankResult]:
    """Retrieval order passed through unchanged, labelled with ``strategy``."""
    return [RerankResult(cl.query_id, strategy, cl.ids) for cl in lists]


# -- report files ---------------------------------------------------------------------------


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def _pct(x: float) -> str:
    return f"{x:.2f}"


def report_csv(rows: Sequence[tuple[str, EvalReport]] | EvalReport) -> str:
    """One row per labelled report, in the given order."""
    if isinstance(rows, EvalReport):
        rows = [(rows.strategy, rows)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for label, rep in rows:
        writer.writerow(
            [
                label,
                *(_pct(rep.recall(k)) if any(r.k == k for r in rep.per_k) else "" for k in DEFAULT_KS),
                rep.n_queries,
                f"{rep.mean_calls:.2f}",
                rep.max_calls,
                rep.diagnostics.parse_failures,
            ]
        )
    return buf.getvalue()


def emit_report(report: EvalReport, path: str | os.PathLike, fmt: str = "json") -> None:
    if fmt == "json":
        atomic_write_text(path, report_json(report))
    elif fmt == "csv":
        atomic_write_text(path, report_csv(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def load_report(path: str | os.PathLike) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))


# -- score distributions --------------------------------------------------------------------


@dataclass(frozen=True)
class ClassStats:
    count: int
    mean: float
    std: float  # population (divisor n)
    histogram: tuple[float, ...]  # N_BINS fractions summing to 1


@dataclass(frozen=True)
class ScoreDistributionSummary:
    value_range: tuple[float, float]
    correct: ClassStats | None
    incorrect: ClassStats | None
    overlap_coefficient: float | None
    strategy: str = ""

    def to_dict(self) -> dict:
        def cls_dict(c: ClassStats | None):
            if c is None:
                return None
            return {"count": c.count, "mean": c.mean, "std": c.std, "histogram": list(c.histogram)}

        return {
            "strategy": self.strategy,
            "value_range": list(self.value_range),
            "bins": N_BINS,
            "correct": cls_dict(self.correct),
            "incorrect": cls_dict(self.incorrect),
            "overlap_coefficient": self.overlap_coefficient,
        }


def _class_stats(values: Sequence[float], lo: float, hi: float) -> ClassStats | None:
    if not values:
        return None
    arr = np.asarray(values, dtype=float)
    counts, _ = np.histogram(arr, bins=N_BINS, range=(lo, hi))  # last bin closed on the right
    return ClassStats(int(arr.size), float(arr.mean()), float(arr.std()), tuple(float(c) / arr.size for c in counts))


def class_stats(
    scores: Iterable[tuple[float, bool]], value_range: tuple[float, float], strategy: str = ""
) -> ScoreDistributionSummary:
    """Per-class mean/std/histogram of ``(value, is_ground_truth)`` pairs and their overlap coefficient."""
    lo, hi = map(float, value_range)
    if not hi > lo:
        raise ValueError(f"degenerate value range {value_range}")
    correct, incorrect = [], []
    for value, is_gt in scores:
        if not (lo <= value <= hi) or math.isnan(value):
            raise ValueError(f"score {value} outside range [{lo}, {hi}]")
        (correct if is_gt else incorrect).append(float(value))
    c, i = _class_stats(correct, lo, hi), _class_stats(incorrect, lo, hi)
    overlap = None
    if c is not None and i is not None:
        overlap = float(sum(min(a, b) for a, b in zip(c.histogram, i.histogram)))
        overlap = min(max(overlap, 0.0), 1.0)
    return ScoreDistributionSummary((lo, hi), c, i, overlap, strategy)


def summary_json(summary: ScoreDistributionSummary) -> str:
    return json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"


# -- SVG ------------------------------------------------------------------------------------

_W, _H = 640, 400
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 56, 16, 40, 48


def _num(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".") if x != int(x) else str(int(x))


def _svg_frame(title: str, x_label: str, y_label: str) -> list[str]:
    pw, ph = _W - _PAD_L - _PAD_R, _H - _PAD_T - _PAD_B
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{_PAD_L}" y1="{_PAD_T + ph}" x2="{_PAD_L + pw}" y2="{_PAD_T + ph}" stroke="black"/>',
        f'<line x1="{_PAD_L}" y1="{_PAD_T}" x2="{_PAD_L}" y2="{_PAD_T + ph}" stroke="black"/>',
        f'<text x="{_PAD_L + pw / 2:.1f}" y="{_H - 10}" text-anchor="middle">{escape(x_label)}</text>',
        f'<text x="14" y="{_PAD_T + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {_PAD_T + ph / 2:.1f})">{escape(y_label)}</text>',
    ]


def histogram_svg(summary: ScoreDistributionSummary, title: str | None = None) -> str:
    """Both class histograms overlaid as translucent bars, with a legend."""
    lo, hi = summary.value_range
    pw, ph = _W - _PAD_L - _PAD_R, _H - _PAD_T - _PAD_B
    title = title or f"{summary.strategy or 'scores'}: correct vs incorrect (overlap {_fmt_overlap(summary)})"
    out = _svg_frame(title, "score", "fraction of candidates")
    classes = [("correct", summary.correct, "#1f77b4"), ("incorrect", summary.incorrect, "#d62728")]
    top = max([max(c.histogram) for _, c, _ in classes if c is not None] + [1e-9])
    bw = pw / N_BINS
    for name, stats, colour in classes:
        if stats is None:
            continue
        for b, frac in enumerate(stats.histogram):
            if frac <= 0:
                continue
            h = ph * frac / top
            out.append(
                f'<rect x="{_PAD_L + b * bw:.2f}" y="{_PAD_T + ph - h:.2f}" width="{bw:.2f}" height="{h:.2f}" '
                f'fill="{colour}" fill-opacity="0.45" stroke="{colour}"><title>{name} bin {b}: {frac:.4f}</title></rect>'
            )
    for t in range(5):
        x = _PAD_L + pw * t / 4
        out.append(f'<text x="{x:.1f}" y="{_PAD_T + ph + 16}" text-anchor="middle">{_num(lo + (hi - lo) * t / 4)}</text>')
    for t in range(5):
        y = _PAD_T + ph - ph * t / 4
        out.append(f'<text x="{_PAD_L - 6}" y="{y + 4:.1f}" text-anchor="end">{top * t / 4:.2f}</text>')
    lx = _PAD_L + pw - 150
    for row, (name, stats, colour) in enumerate(classes):
        y = _PAD_T + 8 + 18 * row
        n = 0 if stats is None else stats.count
        out.append(f'<rect x="{lx}" y="{y}" width="12" height="12" fill="{colour}" fill-opacity="0.45" stroke="{colour}"/>')
        out.append(f'<text x="{lx + 18}" y="{y + 10}">{name} (n={n})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _fmt_overlap(summary: ScoreDistributionSummary) -> str:
    return "n/a" if summary.overlap_coefficient is None else f"{summary.overlap_coefficient:.3f}"


def emit_histogram_svg(summary: ScoreDistributionSummary, path: str | os.PathLike) -> None:
    atomic_write_text(path, histogram_svg(summary))


def line_chart_svg(xs: Sequence[float], series: Mapping[str, Sequence[float]], title: str, x_label: str, y_label: str) -> str:
    """Simple multi-series line chart with a 0..100 y axis (recall percentages)."""
    pw, ph = _W - _PAD_L - _PAD_R, _H - _PAD_T - _PAD_B
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0
    colours = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b")
    out = _svg_frame(title, x_label, y_label)

    def px(x):
        return _PAD_L + pw * (x - x0) / span

    def py(y):
        return _PAD_T + ph - ph * y / 100.0

    for t in range(6):
        out.append(f'<text x="{_PAD_L - 6}" y="{py(20 * t) + 4:.1f}" text-anchor="end">{20 * t}</text>')
    for x in xs:
        out.append(f'<text x="{px(x):.1f}" y="{_PAD_T + ph + 16}" text-anchor="middle">{_num(x)}</text>')
    for i, (name, ys) in enumerate(series.items()):
        colour = colours[i % len(colours)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{colour}"/>')
        ly = _PAD_T + 8 + 18 * i
        lx = _PAD_L + pw - 90
        out.append(f'<line x1="{lx}" y1="{ly + 6}" x2="{lx + 14}" y2="{ly + 6}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 20}" y="{ly + 10}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- noise-sweep tables ---------------------------------------------------------------------


def sweep_csv(rows: Sequence) -> str:
    ks = sorted(rows[0].recall) if rows else list(DEFAULT_KS)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["p", *(f"R@{k}" for k in ks), "mean_calls", "trials", "n_queries"])
    for row in rows:
        writer.writerow([f"{row.p:g}", *(_pct(row.recall[k]) for k in ks), f"{row.mean_calls:.2f}", row.trials, row.n_queries])
    return buf.getvalue()


def sweep_json(rows: Sequence) -> str:
    payload = [
        {
            "p": row.p,
            "recall": {str(k): v for k, v in sorted(row.recall.items())},
            "mean_calls": row.mean_calls,
            "trials": row.trials,
            "n_queries": row.n_queries,
        }
        for row in rows
    ]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def sweep_svg(rows: Sequence) -> str:
    xs = [row.p for row in rows]
    ks = sorted(rows[0].recall)
    series = {f"R@{k}": [row.recall[k] for row in rows] for k in ks}
    return line_chart_svg(xs, series, "Merge-sort rerank under a noisy oracle", "flip probability p", "recall (%)")
