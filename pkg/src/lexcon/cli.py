"""``lexcon`` command line.

Exit codes: 0 success (all constraints satisfied), 1 constraint failure,
2 usage or configuration error, 3 backend error, 130 interrupted.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .backend import BackendError
from .config import (
    BackendConfig,
    Compound,
    ConfigError,
    ConstraintScaling,
    DecodingSweep,
    Downstream,
    PositionBias,
    RunConfig,
    StrategyComparison,
    build_backend,
    load_config,
)
from .constraints import KeywordSet, MatchPolicy, normalize_and_tokenize
from .experiments import (
    SUMMARY_HEADER,
    ExperimentContext,
    ExperimentError,
    ExperimentResult,
    TrialFailed,
    load_records,
    rescore,
    run_compound_files,
    run_constraint_scaling,
    run_decoding_sweep,
    run_downstream,
    run_position_bias,
    run_strategy_comparison,
    summarize,
)
from .metrics import MetricError, TrialMetrics, score
from .sources import SourceError
from .strategies import StrategyAborted, StrategySpec, TemplateError, list_templates, load_template

EXIT_OK, EXIT_UNSATISFIED, EXIT_CONFIG, EXIT_BACKEND, EXIT_INTERRUPTED = 0, 1, 2, 3, 130


def _fail(code: int, kind: str, message: str, payload=None) -> int:
    err = {"error": kind, "message": message}
    if payload is not None:
        err["payload"] = payload
    print(json.dumps(err, ensure_ascii=False), file=sys.stderr)
    return code


def _backend_failure(e: BaseException) -> int:
    cause = getattr(e, "cause", None) or e
    return _fail(EXIT_BACKEND, type(cause).__name__, str(e), getattr(cause, "payload", None))


# -- gen -----------------------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        if args.backend_config:
            bc = BackendConfig.model_validate_json(Path(args.backend_config).read_text(encoding="utf-8"))
        else:
            bc = BackendConfig(kind=args.backend, base_url=args.base_url, model_id=args.model or "",
                               responses=args.response or [], echo=not args.response)
        policy = MatchPolicy(morphological=args.morphological)
        K = args.max_iter if args.max_iter is not None else (0 if args.strategy == "vanilla" else 4)
        spec = StrategySpec(args.strategy, K, args.merge_mode)
        tpl = load_template(args.template, args.templates_dir)
        params = bc.params.build()
        changes = {k: getattr(args, k) for k in ("temperature", "top_k", "top_p", "max_tokens", "seed")
                   if getattr(args, k) is not None}
        params = params.replace(**changes)
        X = KeywordSet.of(args.keywords, policy)
    except (ConfigError, TemplateError, ValueError, OSError) as e:
        return _fail(EXIT_CONFIG, type(e).__name__, str(e))
    if args.dry_run:
        print(tpl.render(X, args.context))
        return EXIT_OK
    try:
        backend = build_backend(bc, policy=policy)
        outcome = spec.run(backend, tpl, X, params, context=args.context, model_id=bc.model_id)
    except (BackendError, StrategyAborted) as e:
        return _backend_failure(e)
    except ValueError as e:
        return _fail(EXIT_CONFIG, type(e).__name__, str(e))
    out = outcome.to_dict()
    out["metrics"] = score(X, normalize_and_tokenize(outcome.final_text, policy)).to_dict()
    print(json.dumps(out, ensure_ascii=False, indent=2))
    return EXIT_OK if outcome.all_satisfied else EXIT_UNSATISFIED


# -- experiment run -----------------------------------------------------------

def run_from_config(cfg: RunConfig, *, dry_run: bool = False,
                    stop_event: Optional[threading.Event] = None, on_record=None) -> ExperimentResult:
    exp = cfg.experiment
    policy = cfg.policy.build()
    compounds_path = exp.compounds if isinstance(exp, Compound) else None
    backend = build_backend(cfg.backend, compounds_path, policy)
    ctx = ExperimentContext(
        backend=backend,
        experiment_id=cfg.run_id,
        strategy=cfg.strategy.spec(),
        template=load_template(cfg.strategy.template, cfg.strategy.templates_dir),
        params=cfg.backend.params.build(),
        policy=policy,
        out_dir=None if dry_run else cfg.out_dir,
        parallelism=cfg.parallelism,
        seed=cfg.seed,
        model_id=cfg.backend.model_id,
        templates_dir=cfg.strategy.templates_dir,
        stop_event=stop_event,
        on_record=on_record,
        dry_run=dry_run,
    )
    if not dry_run:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / "config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    if isinstance(exp, ConstraintScaling):
        return run_constraint_scaling(ctx, exp.source.build(cfg.seed), exp.n_list, exp.n_sets)
    if isinstance(exp, PositionBias):
        return run_position_bias(ctx, exp.source.build(cfg.seed), exp.n_list, exp.sets_per_n, exp.shuffles,
                                 exp.n_permutations)
    if isinstance(exp, Compound):
        return run_compound_files(ctx, exp.compounds, exp.controls, exp.limit, group_size=exp.group_size,
                                  rounds=exp.rounds)
    if isinstance(exp, DecodingSweep):
        return run_decoding_sweep(ctx, exp.source.build(cfg.seed), exp.grids, exp.n_instances, exp.m)
    if isinstance(exp, Downstream):
        return run_downstream(ctx, exp.task, exp.n_list, exp.n_sets,
                              exp.source.build(cfg.seed) if exp.source else None,
                              exp.params.build() if exp.params else None)
    assert isinstance(exp, StrategyComparison)
    return run_strategy_comparison(ctx, exp.source.build(cfg.seed), exp.m, exp.K_list, exp.n_sets,
                                   exp.strategies)


def _print_table(rows: Sequence[dict], header: Sequence[str], out=None) -> None:
    out = out or sys.stdout

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r[h]) for h in header] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)), file=out)
    for c in cells:
        print("  ".join(v.ljust(w) for v, w in zip(c, widths)), file=out)


def cmd_experiment_run(args) -> int:
    overrides = {"output_dir": args.output_dir, "parallelism": args.parallelism, "seed": args.seed,
                 "experiment_id": args.experiment_id}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "ConfigError", str(e))

    stop = threading.Event()

    def on_sigint(signum, frame):
        if stop.is_set():
            raise KeyboardInterrupt
        stop.set()
        print("interrupt: finishing in-flight trials (press again to abort)", file=sys.stderr)

    previous = signal.signal(signal.SIGINT, on_sigint) if threading.current_thread() is threading.main_thread() \
        else None
    try:
        result = run_from_config(cfg, dry_run=args.dry_run, stop_event=stop)
    except TrialFailed as e:
        return _backend_failure(e.cause if isinstance(e.cause, StrategyAborted) else e)
    except (ExperimentError, SourceError, TemplateError, ValueError) as e:
        return _fail(EXIT_CONFIG, type(e).__name__, str(e))
    finally:
        if previous is not None:
            signal.signal(signal.SIGINT, previous)
    if args.dry_run:
        for p in result.prompts:
            print(p)
            print("---")
        return EXIT_OK
    _print_table(result.summary, SUMMARY_HEADER)
    if "n_split" in result.details:
        print(json.dumps(result.details, indent=2))
    print(f"{result.new_trials} new trials; results in {cfg.out_dir}", file=sys.stderr)
    if not result.complete:
        print("run incomplete; rerun the same command to resume", file=sys.stderr)
        return EXIT_INTERRUPTED
    return EXIT_OK


# -- eval / report --------------------------------------------------------------

def _read(path: str) -> list[dict]:
    records = load_records(path)
    if not records:
        raise ExperimentError(f"{path}: no records")
    return records


def _write_summary(rows: list[dict], output: Optional[str]) -> None:
    if output:
        with open(output, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=SUMMARY_HEADER)
            w.writeheader()
            w.writerows(rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=SUMMARY_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_eval(args) -> int:
    try:
        records = _read(args.results)
        rescored, mismatched = [], []
        for rec in records:
            m = rescore(rec)
            if m != TrialMetrics.from_dict(rec["metrics"]):
                mismatched.append(rec["trial_index"])
            rescored.append({**rec, "metrics": m.to_dict()})
    except (ExperimentError, MetricError, KeyError, ValueError, OSError) as e:
        return _fail(EXIT_CONFIG, type(e).__name__, str(e))
    _write_summary(summarize(rescored), args.output)
    print(json.dumps({"records": len(records), "mismatched": mismatched}), file=sys.stderr)
    return EXIT_UNSATISFIED if mismatched else EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = summarize(_read(args.results))
    except (ExperimentError, MetricError, KeyError, ValueError, OSError) as e:
        return _fail(EXIT_CONFIG, type(e).__name__, str(e))
    _write_summary(rows, args.output)
    return EXIT_OK


def cmd_templates_list(args) -> int:
    for name in list_templates(args.templates_dir):
        print(name)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="lexcon", description="Keyword-constrained generation toolkit.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate one text for a keyword set", formatter_class=fmt)
    g.add_argument("keywords", nargs="+", help="keywords, in prompt order")
    g.add_argument("--backend", choices=["synthetic", "scripted", "http"], default="synthetic")
    g.add_argument("--backend-config", help="JSON file with a backend section (overrides --backend)")
    g.add_argument("--base-url", help="chat-completions server, for --backend http")
    g.add_argument("--model", help="model id sent upstream")
    g.add_argument("--response", action="append", help="scripted reply (repeatable); default echoes keywords")
    g.add_argument("--strategy", choices=["vanilla", "rj", "dnc"], default="vanilla")
    g.add_argument("--max-iter", type=int, help="extra calls K (default 0 for vanilla, 4 otherwise)")
    g.add_argument("--merge-mode", choices=["concat", "llm_rewrite"], default="concat")
    g.add_argument("--template", default="sentence")
    g.add_argument("--templates-dir")
    g.add_argument("--context", default="", help="text substituted for {context}")
    g.add_argument("--temperature", type=float)
    g.add_argument("--top-k", type=int)
    g.add_argument("--top-p", type=float)
    g.add_argument("--max-tokens", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--morphological", action="store_true", help="accept simple inflections as matches")
    g.add_argument("--dry-run", action="store_true", help="print the rendered prompt and exit")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("experiment", help="batch experiments")
    esub = e.add_subparsers(dest="action", required=True)
    r = esub.add_parser("run", help="run (or resume) the experiment in a JSON config", formatter_class=fmt)
    r.add_argument("config")
    r.add_argument("--output-dir", help="override output_dir")
    r.add_argument("--parallelism", type=int, help="override parallelism")
    r.add_argument("--seed", type=int, help="override seed")
    r.add_argument("--experiment-id", help="override experiment_id")
    r.add_argument("--dry-run", action="store_true", help="print every first-call prompt, call nothing")
    r.set_defaults(func=cmd_experiment_run)

    ev = sub.add_parser("eval", help="re-score a results JSONL file offline", formatter_class=fmt)
    ev.add_argument("results")
    ev.add_argument("-o", "--output", help="summary CSV path (default stdout)")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="summarize a results JSONL file as CSV", formatter_class=fmt)
    rp.add_argument("results")
    rp.add_argument("-o", "--output", help="summary CSV path (default stdout)")
    rp.set_defaults(func=cmd_report)

    t = sub.add_parser("templates", help="prompt templates")
    tsub = t.add_subparsers(dest="action", required=True)
    tl = tsub.add_parser("list", help="list available templates", formatter_class=fmt)
    tl.add_argument("--templates-dir")
    tl.set_defaults(func=cmd_templates_list)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("aborted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
