"""Command-line entry point: validate, rerank, eval, simulate, analyze (plus make-fixture).

Settings can come from an INI config file (``--config run.ini``, section ``[vlmrerank]``)
whose keys are the long option names with dashes or underscores, e.g.::

    [vlmrerank]
    strategy = pairwise
    backend = http
    endpoint = http://localhost:8000/v1/chat/completions
    model = my-vision-model
    auth-env = VLM_API_KEY
    cache-dir = .cache/vlm

Flags given on the command line override the file. Credentials are read only from the
environment variable named by ``auth-env``; never put tokens in the file.

Exit codes: 0 success, 1 data violation, 2 IO or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from collections import defaultdict
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import __version__
from .datamodel import (
    CandidateList,
    SchemaError,
    StrategyId,
    atomic_write_text,
    iter_candidate_lines,
    load_candidates,
    load_results,
    save_candidates,
    save_results,
    validate_candidate_list,
)
from .evaluation import (
    DEFAULT_KS,
    class_stats,
    histogram_svg,
    recall_at_k,
    report_csv,
    report_json,
    summary_json,
    sweep_csv,
    sweep_json,
    sweep_svg,
    truths_from,
)
from .gateway import BackendConfig, VlmGateway
from .pairwise import SwapConsistent, VlmComparator
from .pointwise import VlmScorer
from .runner import run_rerank
from .simbackend import (
    REGIMES,
    SCORE_RANGES,
    OracleComparator,
    OracleConfig,
    SyntheticScoreConfig,
    SyntheticScorer,
    baseline_fixture,
    run_noise_sweep,
    synthesize_dataset,
)

log = logging.getLogger("vlmrerank")

EXIT_OK, EXIT_DATA, EXIT_IO = 0, 1, 2
CONFIG_SECTION = "vlmrerank"
DEFAULT_GRID = "0,0.1,0.2,0.3,0.4,0.5"
_SECRET_WORDS = {"token", "secret", "password", "apikey", "key"}


class ConfigError(Exception):
    pass


def _bundled(name: str) -> Path:
    return Path(str(resources.files("vlmrerank").joinpath("data", name)))


def _resolve_input(path: str) -> Path:
    """``bundled:<name>`` points at a dataset shipped inside the package."""
    if path.startswith("bundled:"):
        return _bundled(path.split(":", 1)[1] + ".jsonl")
    return Path(path)


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("every k must be a positive integer")
    return ks


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid grid {text!r}") from None
    if not grid:
        raise argparse.ArgumentTypeError("grid must contain at least one value")
    bad = [p for p in grid if not 0.0 <= p <= 1.0]
    if bad:
        raise argparse.ArgumentTypeError(f"flip probabilities must lie in [0, 1]: {bad}")
    return grid


def _write_jsonl(path: str | Path, rows: list[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


# -- validate -------------------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    path = _resolve_input(args.input)
    n = bad = 0
    seen: set[str] = set()
    try:
        for lineno, cl in iter_candidate_lines(path):
            n += 1
            report = validate_candidate_list(cl)
            problems = list(report.violations)
            if cl.query_id in seen:
                problems.append(f"duplicate query id {cl.query_id!r}")
            seen.add(cl.query_id)
            for v in problems:
                print(f"line {lineno}: query {cl.query_id!r}: {v}")
            if problems:
                bad += 1
            elif report.gt_absent and args.verbose:
                print(f"line {lineno}: query {cl.query_id!r}: note: ground truth not among candidates")
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_IO
    except SchemaError as exc:
        print(f"schema error: {exc}")
        return EXIT_DATA
    print(f"{n} queries checked, {bad} invalid", file=sys.stderr)
    return EXIT_DATA if bad else EXIT_OK


# -- rerank ---------------------------------------------------------------------------------


def _backend_config(args: argparse.Namespace) -> BackendConfig:
    if not args.endpoint or not args.model:
        raise ConfigError("--backend http requires --endpoint and --model")
    try:
        cfg = BackendConfig(
            endpoint_url=args.endpoint,
            model_id=args.model,
            auth_env_var=args.auth_env,
            temperature=args.temperature,
            max_output_tokens=args.max_tokens or (512 if args.strategy is StrategyId.REASON_YESNO else 16),
            logprob_top_n=args.top_logprobs,
            max_in_flight=args.max_in_flight,
            timeout=args.timeout,
            retry_max_attempts=args.retries,
            retry_backoff=args.retry_backoff,
            max_image_dim=args.max_image_dim,
        )
        cfg.check_for(args.strategy)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _check_rerank_config(args: argparse.Namespace) -> None:
    if args.backend == "oracle" and args.strategy.is_pointwise:
        raise ConfigError("the oracle backend is a comparator; use --strategy pairwise")
    if args.backend == "synthetic" and not args.strategy.is_pointwise:
        raise ConfigError("the synthetic backend scores candidates; use a pointwise strategy")
    if args.backend in ("oracle", "synthetic") and args.seed is None:
        raise ConfigError(f"--backend {args.backend} requires --seed")
    if args.backend == "oracle" and not 0.0 <= args.flip_p <= 1.0:
        raise ConfigError("--flip-p must lie in [0, 1]")
    if args.swap_consistency and args.strategy.is_pointwise:
        raise ConfigError("--swap-consistency applies to pairwise only")


def cmd_rerank(args: argparse.Namespace) -> int:
    args.strategy = StrategyId(args.strategy)
    try:
        _check_rerank_config(args)
        http_cfg = _backend_config(args) if args.backend == "http" else None
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    path = _resolve_input(args.input)
    try:
        lists = load_candidates(path)
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_IO
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.limit is not None:
        lists = lists[: args.limit]
    truths = truths_from(lists)

    gateway = None
    scorer = comparator = None
    if args.backend == "http":
        gateway = VlmGateway(http_cfg, args.cache_dir)
        if args.strategy.is_pointwise:
            scorer = VlmScorer(args.strategy, gateway, args.images_root)
        else:
            comparator = VlmComparator(gateway, args.images_root)
    elif args.backend == "oracle":
        comparator = OracleComparator(OracleConfig(args.flip_p, args.seed, args.per_call_noise), truths)
    else:
        regime = args.regime
        if regime not in REGIMES:
            print(f"config error: unknown regime {regime!r}; choose from {sorted(REGIMES)}", file=sys.stderr)
            return EXIT_IO
        scorer = SyntheticScorer(SyntheticScoreConfig.preset(regime, args.strategy, args.seed), truths)
    if comparator is not None and args.swap_consistency:
        comparator = SwapConsistent(comparator)

    try:
        out = run_rerank(lists, args.strategy, scorer=scorer, comparator=comparator, workers=args.workers)
    finally:
        if gateway is not None:
            gateway.close()

    diag = out.diagnostics
    # cache hits depend on cache state, not on the inputs; keep them out of the results file
    persisted = [replace(r, diagnostics=replace(r.diagnostics, cache_hits=0)) for r in out.results]
    by_id = {cl.query_id: cl for cl in lists}
    try:
        save_results(persisted, args.output, by_id)
        if args.scores_out:
            _write_jsonl(args.scores_out, out.score_rows)
        if args.audit_log:
            _write_jsonl(args.audit_log, out.audit_rows)
        summary = {
            "queries": len(out.results),
            "strategy": args.strategy.value,
            "backend": args.backend,
            "comparator_calls": out.total_calls,
            "parse_failures": diag.parse_failures,
            "fallbacks": diag.fallbacks,
            "cache_hits": diag.cache_hits,
            "http_requests": gateway.stats.http_requests if gateway else 0,
            "retries": gateway.stats.retries if gateway else 0,
        }
        atomic_write_text(str(args.output) + ".run.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        results = load_results(args.pred)
        lists = load_candidates(_resolve_input(args.input))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not results:
        print("error: prediction file contains no results", file=sys.stderr)
        return EXIT_DATA
    by_id = {cl.query_id: cl for cl in lists}
    problems = []
    for r in results:
        cl = by_id.get(r.query_id)
        if cl is None:
            problems.append(f"query {r.query_id!r} not in input")
        elif sorted(r.order) != sorted(cl.ids):
            problems.append(f"query {r.query_id!r}: order is not a permutation of its candidates")
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return EXIT_DATA
    report = recall_at_k(results, truths_from(lists), args.ks, strategy=args.label)
    out_dir = Path(args.out_dir)
    try:
        atomic_write_text(out_dir / f"{args.name}.json", report_json(report))
        atomic_write_text(out_dir / f"{args.name}.csv", report_csv(report))
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return EXIT_IO
    print(" ".join(f"R@{r.k}={r.recall:.2f}" for r in report.per_k) + f" n={report.n_queries}")
    return EXIT_OK


# -- simulate -------------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    dataset = synthesize_dataset(args.n_queries, args.k, args.seed)
    try:
        rows = run_noise_sweep(dataset, args.grid, args.trials, args.seed, per_call_noise=args.per_call_noise)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out_dir)
    try:
        atomic_write_text(out_dir / "sweep.csv", sweep_csv(rows))
        atomic_write_text(out_dir / "sweep.json", sweep_json(rows))
        atomic_write_text(out_dir / "sweep.svg", sweep_svg(rows))
    except OSError as exc:
        print(f"error: cannot write sweep: {exc}", file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(sweep_csv(rows))
    return EXIT_OK


# -- analyze --------------------------------------------------------------------------------


def cmd_analyze(args: argparse.Namespace) -> int:
    by_strategy: dict[str, list[tuple[float, bool]]] = defaultdict(list)
    try:
        with open(args.scores, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                row = json.loads(line)
                if "is_ground_truth" not in row or not isinstance(row["is_ground_truth"], bool):
                    print(f"line {lineno}: missing is_ground_truth label", file=sys.stderr)
                    return EXIT_DATA
                if not row.get("valid", True) or row.get("value") is None:
                    continue
                by_strategy[row["strategy"]].append((float(row["value"]), row["is_ground_truth"]))
    except OSError as exc:
        print(f"error: cannot read {args.scores}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out_dir = Path(args.out_dir)
    for strategy, pairs in sorted(by_strategy.items()):
        try:
            value_range = SCORE_RANGES[StrategyId(strategy)]
            summary = class_stats(pairs, value_range, strategy)
        except ValueError as exc:
            print(f"{strategy}: {exc}", file=sys.stderr)
            return EXIT_DATA
        for name, cls in (("correct", summary.correct), ("incorrect", summary.incorrect)):
            if cls is None:
                print(f"warning: {strategy}: no {name} candidates; statistics for that class are absent", file=sys.stderr)
        try:
            atomic_write_text(out_dir / f"{strategy}_summary.json", summary_json(summary))
            atomic_write_text(out_dir / f"{strategy}_hist.svg", histogram_svg(summary))
        except OSError as exc:
            print(f"error: cannot write summary: {exc}", file=sys.stderr)
            return EXIT_IO
        ov = "n/a" if summary.overlap_coefficient is None else f"{summary.overlap_coefficient:.4f}"
        print(f"{strategy}: overlap={ov}")
    return EXIT_OK


# -- make-fixture ---------------------------------------------------------------------------


def cmd_make_fixture(args: argparse.Namespace) -> int:
    if args.kind == "baseline":
        lists: list[CandidateList] = baseline_fixture(seed=args.seed)
    else:
        lists = synthesize_dataset(args.n_queries, args.k, args.seed)
    try:
        save_candidates(lists, args.output)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(lists)} queries to {args.output}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlmrerank", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI file with a [vlmrerank] section; flags override it")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a candidate-list file; prints one violation per line")
    p.add_argument("input", help="candidate-list JSONL file (or bundled:<name>)")
    p.add_argument("-v", "--verbose", action="store_true", help="also report queries whose ground truth was not retrieved")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("rerank", help="rerank every query and write a results file")
    p.add_argument("--input", required=True, help="candidate-list JSONL file (or bundled:<name>)")
    p.add_argument("--output", required=True, help="results JSONL file to write")
    p.add_argument("--strategy", choices=[s.value for s in StrategyId], default="pairwise", help="reranking strategy")
    p.add_argument("--backend", choices=["http", "oracle", "synthetic"], default="oracle", help="who answers prompts")
    p.add_argument("--seed", type=int, default=None, help="seed for simulated backends (required for oracle/synthetic)")
    p.add_argument("--flip-p", type=float, default=0.0, help="oracle: probability a comparison is reported wrong")
    p.add_argument("--per-call-noise", action="store_true", help="oracle: draw noise per call instead of per pair")
    p.add_argument("--regime", default="constant", help=f"synthetic: score regime, one of {sorted(REGIMES)}")
    p.add_argument("--endpoint", help="http: chat-completions URL")
    p.add_argument("--model", help="http: model id sent with each request")
    p.add_argument("--auth-env", default="VLM_API_KEY", help="http: environment variable holding the bearer token")
    p.add_argument("--temperature", type=float, default=0.0, help="http: sampling temperature (default 0)")
    p.add_argument("--max-tokens", type=int, default=None, help="http: max output tokens (default 16; 512 for reason_yesno)")
    p.add_argument("--top-logprobs", type=int, default=20, help="http: alternatives per token position (default 20)")
    p.add_argument("--max-in-flight", type=int, default=4, help="http: concurrent requests (default 4)")
    p.add_argument("--timeout", type=float, default=120.0, help="http: request timeout in seconds")
    p.add_argument("--retries", type=int, default=4, help="http: attempts per request including the first")
    p.add_argument("--retry-backoff", type=float, default=1.0, help="http: base backoff in seconds, doubled per retry")
    p.add_argument("--max-image-dim", type=int, default=None, help="http: downscale images above this size (needs Pillow)")
    p.add_argument("--images-root", default=None, help="directory that relative image paths are resolved against")
    p.add_argument("--cache-dir", default=None, help="http: response cache directory (enables resumable runs)")
    p.add_argument("--scores-out", default=None, help="pointwise: write per-candidate score dump (JSONL)")
    p.add_argument("--audit-log", default=None, help="pairwise: write per-comparison audit log (JSONL)")
    p.add_argument("--swap-consistency", action="store_true", help="pairwise: ask each pair in both slot orders")
    p.add_argument("--workers", type=int, default=4, help="queries processed concurrently (default 4)")
    p.add_argument("--limit", type=int, default=None, help="only rerank the first N queries")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="Recall@k of a results file against the input's ground truth")
    p.add_argument("--pred", required=True, help="results JSONL written by rerank")
    p.add_argument("--input", required=True, help="candidate-list file holding the ground truth")
    p.add_argument("--ks", type=_parse_ks, default=list(DEFAULT_KS), help="comma-separated cutoffs (default 1,3,5)")
    p.add_argument("--out-dir", default="reports", help="directory for <name>.json and <name>.csv")
    p.add_argument("--name", default="report", help="report file stem (default report)")
    p.add_argument("--label", default=None, help="strategy label in the report (default: from results)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="noise sweep: merge-sort rerank with an oracle that errs with probability p")
    p.add_argument("--grid", type=_parse_grid, default=_parse_grid(DEFAULT_GRID), help=f"flip probabilities (default {DEFAULT_GRID})")
    p.add_argument("--trials", type=int, default=200, help="seeds per grid point (default 200)")
    p.add_argument("--seed", type=int, default=0, help="top-level seed (default 0)")
    p.add_argument("--k", type=int, default=20, help="candidates per query (default 20)")
    p.add_argument("--n-queries", type=int, default=1, help="synthetic queries per trial (default 1)")
    p.add_argument("--per-call-noise", action="store_true", help="draw noise per call instead of per pair")
    p.add_argument("--out-dir", default="sweep", help="directory for sweep.csv, sweep.json, sweep.svg")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="score-distribution summaries from a pointwise score dump")
    p.add_argument("--scores", required=True, help="score dump written by rerank --scores-out")
    p.add_argument("--out-dir", default="analysis", help="directory for <strategy>_summary.json and _hist.svg")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("make-fixture", help="write a synthetic candidate-list dataset")
    p.add_argument("--output", required=True, help="JSONL file to write")
    p.add_argument("--kind", choices=["baseline", "uniform"], default="baseline",
                   help="baseline: 500 queries with baseline R@1/3/5 = 61.20/73.80/82.40; uniform: random GT ranks")
    p.add_argument("--n-queries", type=int, default=500, help="uniform: number of queries")
    p.add_argument("--k", type=int, default=20, help="uniform: candidates per query")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.set_defaults(func=cmd_make_fixture)
    return parser


def _config_defaults(path: str, parser: argparse.ArgumentParser, command: str) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config file {path}")
    if not cp.has_section(CONFIG_SECTION):
        raise ConfigError(f"config file {path} has no [{CONFIG_SECTION}] section")
    subparser = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    actions = {a.dest: a for a in subparser._actions if a.dest != "help"}
    out = {}
    for key, raw in cp.items(CONFIG_SECTION):
        dest = key.replace("-", "_")
        if _SECRET_WORDS & set(dest.split("_")):
            raise ConfigError(f"{key}: secrets belong in environment variables, not config files")
        if dest not in actions:
            continue  # keys for other subcommands
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            out[dest] = cp.getboolean(CONFIG_SECTION, key)
        elif action.type is not None:
            try:
                out[dest] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            out[dest] = raw
        if action.required:
            action.required = False
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    command = next((tok for tok in rest if tok in subparsers), None)
    if known.config and command is not None:
        try:
            defaults = _config_defaults(known.config, parser, command)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_IO
        subparsers[command].set_defaults(**defaults)
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
