"""Batch experiment protocols with resumable JSONL persistence.

Every protocol expands into a deterministic list of trials. The runner
executes the ones missing from ``results.jsonl``, appends one record per
line, and the protocol then derives its summaries from the full record set.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import threading
import time
from collections import OrderedDict
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .backend import Backend, DecodingParams
from .constraints import EXACT, KeywordSet, MatchPolicy, detect_compound_split, normalize_and_tokenize
from .metrics import (
    TrialMetrics,
    aggregate,
    positional_coverage,
    positional_trend,
    score,
)
from .sources import KeywordSource, SourceError, load_compounds, load_pool
from .strategies import DEFAULT_TEMPLATE, PromptTemplate, StrategySpec, load_template
from .synthetic import SyntheticBackend, implied_instance_success, mix

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RESULTS_FILE = "results.jsonl"
SUMMARY_FILE = "summary.csv"
SUMMARY_HEADER = ["experiment_id", "group", "n_trials", "mean_success", "mean_coverage", "ci_low", "ci_high"]
_SEED_SPACE = 2 ** 48

DEFAULT_N_LIST = (3, 5, 7, 10, 15, 20)
TEMPERATURE_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))
TOP_K_GRID = (1, 2, 5, 10, 20, 50, 100, 200, 500)
TOP_P_GRID = TEMPERATURE_GRID
DOWNSTREAM_PARAMS = DecodingParams(top_p=0.9)
DOWNSTREAM_TASKS = {
    # task -> (template, default source, default n_list)
    "recipe": ("recipe", KeywordSource("sampled_pool", "bundled:ingredients"), (5, 10, 15)),
    "table_to_text": ("table_to_text", KeywordSource("file_sets", "bundled:tables"), (5, 10, 15)),
    "profile": ("profile", KeywordSource("file_sets", "bundled:clients"), (5, 10)),
}


class ExperimentError(RuntimeError):
    pass


class TrialFailed(ExperimentError):
    def __init__(self, experiment_id: str, trial_index: int, cause: BaseException):
        super().__init__(f"{experiment_id} trial {trial_index} failed: {cause}")
        self.experiment_id = experiment_id
        self.trial_index = trial_index
        self.cause = cause


@dataclass(frozen=True)
class TrialSpec:
    trial_index: int
    keywords: tuple[str, ...]
    group: dict
    strategy: StrategySpec
    params: DecodingParams
    context: str = ""
    template: Optional[PromptTemplate] = None
    meta: dict = field(default_factory=dict)
    # trials sharing a seed_key see the same random stream (defaults to trial_index)
    seed_key: Optional[int] = None


@dataclass
class ExperimentContext:
    backend: Backend
    experiment_id: str = "experiment"
    strategy: StrategySpec = StrategySpec()
    template: PromptTemplate = DEFAULT_TEMPLATE
    params: DecodingParams = DecodingParams.greedy()
    policy: MatchPolicy = EXACT
    out_dir: Optional[Path] = None
    parallelism: int = 1
    seed: int = 0
    model_id: str = ""
    templates_dir: Optional[str] = None
    stop_event: Optional[threading.Event] = None
    on_record: Optional[Callable[[dict], None]] = None
    dry_run: bool = False


@dataclass
class ExperimentResult:
    experiment_id: str
    records: list[dict]
    summary: list[dict]
    complete: bool
    details: dict = field(default_factory=dict)
    new_trials: int = 0
    prompts: list[str] = field(default_factory=list)


def trial_seed(run_seed: int, trial_index: int) -> int:
    return mix(run_seed, trial_index) % _SEED_SPACE


def _group_key(group: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in group.items())


def _dump(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def load_records(path: str | Path, repair: bool = False) -> list[dict]:
    """Read a results file; a torn final line (interrupted write) is dropped,
    and with ``repair`` also truncated away on disk."""
    path = Path(path)
    if not path.exists():
        return []
    records, good_bytes = [], 0
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    for raw in data.splitlines(keepends=True):
        offset += len(raw)
        if not raw.strip():
            good_bytes = offset
            continue
        try:
            if not raw.endswith(b"\n"):
                raise ValueError("unterminated line")
            records.append(json.loads(raw))
            good_bytes = offset
        except ValueError:
            if offset != len(data):
                raise ExperimentError(f"{path}: corrupt record before end of file")
            logger.warning("%s: dropping torn final line", path)
    if repair and good_bytes != len(data):
        with open(path, "r+b") as f:
            f.truncate(good_bytes)
    return records


class Runner:
    """Executes trial specs; owns the results file and the worker pool.

    Records are written by the calling thread only, one complete line at a
    time, so an interrupted run never leaves a half-written record behind.
    """

    def __init__(self, ctx: ExperimentContext):
        self.ctx = ctx
        self.path = Path(ctx.out_dir) / RESULTS_FILE if ctx.out_dir else None

    def _existing(self) -> dict[int, dict]:
        if self.path is None:
            return {}
        done = {}
        for rec in load_records(self.path, repair=True):
            if rec.get("experiment_id") != self.ctx.experiment_id:
                raise ExperimentError(
                    f"{self.path} belongs to experiment {rec.get('experiment_id')!r}, "
                    f"not {self.ctx.experiment_id!r}"
                )
            done[rec["trial_index"]] = rec
        return done

    def execute(self, spec: TrialSpec) -> dict:
        ctx = self.ctx
        t0 = time.perf_counter()
        X = KeywordSet.of(spec.keywords, ctx.policy)
        key = spec.trial_index if spec.seed_key is None else spec.seed_key
        params = spec.params.replace(seed=trial_seed(ctx.seed, key))
        tpl = spec.template or ctx.template
        try:
            outcome = spec.strategy.run(ctx.backend, tpl, X, params, context=spec.context,
                                        model_id=ctx.model_id)
        except Exception as e:
            raise TrialFailed(ctx.experiment_id, spec.trial_index, e) from e
        metrics = score(X, normalize_and_tokenize(outcome.final_text, ctx.policy))
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment_id": ctx.experiment_id,
            "trial_index": spec.trial_index,
            "group": spec.group,
            "keywords": [{"surface": s, "position": i} for i, s in enumerate(spec.keywords)],
            "strategy_id": spec.strategy.label,
            "strategy": {"id": spec.strategy.id, "K": spec.strategy.K, "merge_mode": spec.strategy.merge_mode},
            "template": tpl.name,
            "context": spec.context,
            "params": params.to_dict(),
            "policy": {"case_fold": ctx.policy.case_fold, "unicode_normalize": ctx.policy.unicode_normalize,
                       "morphological": ctx.policy.morphological},
            "backend_id": ctx.backend.backend_id,
            "meta": spec.meta,
            "outcome": outcome.to_dict(),
            "metrics": metrics.to_dict(),
            "wall_time": round(time.perf_counter() - t0, 6),
        }

    def run(self, specs: Sequence[TrialSpec]) -> tuple[list[dict], bool, int]:
        """Returns ``(records sorted by trial_index, complete, new trial count)``."""
        indices = [s.trial_index for s in specs]
        if len(set(indices)) != len(indices):
            raise ExperimentError("duplicate trial indices in experiment definition")
        done = self._existing()
        pending = [s for s in specs if s.trial_index not in done]
        stop = self.ctx.stop_event or threading.Event()
        new = 0
        out = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            out = open(self.path, "a", encoding="utf-8")

        def emit(rec: dict):
            nonlocal new
            if out is not None:
                out.write(_dump(rec) + "\n")
                out.flush()
            done[rec["trial_index"]] = rec
            new += 1
            if self.ctx.on_record:
                self.ctx.on_record(rec)

        try:
            if self.ctx.parallelism <= 1:
                for spec in pending:
                    if stop.is_set():
                        break
                    emit(self.execute(spec))
            else:
                self._run_parallel(pending, stop, emit)
        finally:
            if out is not None:
                out.close()
        wanted = set(indices)
        records = [done[i] for i in sorted(done) if i in wanted]
        return records, len(records) == len(specs), new

    def _run_parallel(self, pending: list[TrialSpec], stop: threading.Event, emit) -> None:
        width = self.ctx.parallelism
        queue = iter(pending)
        failure: Optional[BaseException] = None
        with ThreadPoolExecutor(max_workers=width) as pool:
            inflight = set()

            def fill():
                while len(inflight) < 2 * width and not stop.is_set() and failure is None:
                    spec = next(queue, None)
                    if spec is None:
                        return
                    inflight.add(pool.submit(self.execute, spec))

            fill()
            while inflight:
                finished, _ = wait(inflight, return_when=FIRST_COMPLETED)
                for fut in finished:
                    inflight.discard(fut)
                    try:
                        emit(fut.result())
                    except TrialFailed as e:
                        failure = failure or e
                fill()
        if failure is not None:
            raise failure


def summarize(records: Iterable[dict], experiment_id: Optional[str] = None) -> list[dict]:
    groups: "OrderedDict[str, list[TrialMetrics]]" = OrderedDict()
    ids: dict[str, str] = {}
    for rec in records:
        key = _group_key(rec.get("group", {}))
        groups.setdefault(key, []).append(TrialMetrics.from_dict(rec["metrics"]))
        ids.setdefault(key, rec.get("experiment_id", experiment_id or ""))
    rows = []
    for key, trials in groups.items():
        agg = aggregate(trials)
        rows.append({
            "experiment_id": experiment_id or ids[key],
            "group": key,
            "n_trials": agg.n_trials,
            "mean_success": agg.mean_instance_success,
            "mean_coverage": agg.mean_keyword_coverage,
            "ci_low": agg.ci_low,
            "ci_high": agg.ci_high,
        })
    return rows


def write_csv(path: Path, rows: Sequence[dict], header: Optional[Sequence[str]] = None) -> None:
    header = list(header or (rows[0].keys() if rows else []))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def rescore(record: dict) -> TrialMetrics:
    """Recompute a record's metrics from its stored final text."""
    pol = MatchPolicy(**record.get("policy", {}))
    X = KeywordSet.of([k["surface"] for k in sorted(record["keywords"], key=lambda k: k["position"])], pol)
    return score(X, normalize_and_tokenize(record["outcome"]["final_text"], pol))


def _finish(ctx: ExperimentContext, specs: list[TrialSpec]) -> ExperimentResult:
    if ctx.dry_run:
        return ExperimentResult(ctx.experiment_id, [], [], False, prompts=list(dry_run_prompts(specs, ctx)))
    records, complete, new = Runner(ctx).run(specs)
    summary = summarize(records, ctx.experiment_id) if records else []
    if ctx.out_dir is not None:
        write_csv(Path(ctx.out_dir) / SUMMARY_FILE, summary, SUMMARY_HEADER)
    return ExperimentResult(ctx.experiment_id, records, summary, complete, new_trials=new)


# -- protocols -----------------------------------------------------------------

def build_scaling_trials(ctx: ExperimentContext, source: KeywordSource, n_list: Sequence[int],
                         n_sets: int) -> list[TrialSpec]:
    specs = []
    for n in n_list:
        for j, item in enumerate(source.sets(n, n_sets, ctx.policy)):
            specs.append(TrialSpec(len(specs), item.keywords, {"n": n}, ctx.strategy, ctx.params,
                                   item.context, meta={"set": j}))
    return specs


def run_constraint_scaling(ctx: ExperimentContext, source: KeywordSource,
                           n_list: Sequence[int] = DEFAULT_N_LIST, n_sets: int = 100) -> ExperimentResult:
    try:
        specs = build_scaling_trials(ctx, source, n_list, n_sets)
    except SourceError as e:
        raise ExperimentError(f"configuration error: {e}") from e
    return _finish(ctx, specs)


def build_position_trials(ctx: ExperimentContext, source: KeywordSource, n_list: Sequence[int],
                          sets_per_n: int, shuffles: int) -> list[TrialSpec]:
    if shuffles < 2:
        raise ExperimentError("position bias needs at least 2 shuffles per set")
    specs = []
    for n in n_list:
        try:
            items = source.sets(n, sets_per_n, ctx.policy)
        except SourceError as e:
            raise ExperimentError(f"configuration error: {e}") from e
        for j, item in enumerate(items):
            for s in range(shuffles):
                order = list(range(n))
                random.Random(f"{ctx.seed}/perm/{n}/{j}/{s}").shuffle(order)
                kws = tuple(item.keywords[i] for i in order)
                specs.append(TrialSpec(len(specs), kws, {"n": n}, ctx.strategy, ctx.params, item.context,
                                       meta={"set": j, "shuffle": s, "permutation": order}))
    return specs


def run_position_bias(ctx: ExperimentContext, source: KeywordSource, n_list: Sequence[int] = DEFAULT_N_LIST,
                      sets_per_n: int = 100, shuffles: int = 20, n_permutations: int = 2000) -> ExperimentResult:
    result = _finish(ctx, build_position_trials(ctx, source, n_list, sets_per_n, shuffles))
    if ctx.dry_run:
        return result
    by_n: dict[int, list[TrialMetrics]] = {}
    for rec in result.records:
        by_n.setdefault(rec["group"]["n"], []).append(TrialMetrics.from_dict(rec["metrics"]))
    positional, trends = [], []
    details = {}
    for n, trials in by_n.items():
        rates = positional_coverage(trials, n)
        trend = positional_trend(rates, n_permutations, seed=ctx.seed) if n >= 2 else None
        details[n] = {"rates": rates, "trend": trend, "n_trials": len(trials)}
        positional += [{"experiment_id": ctx.experiment_id, "n": n, "position": i, "coverage": r,
                        "n_trials": len(trials)} for i, r in enumerate(rates)]
        if trend is not None:
            trends.append({"experiment_id": ctx.experiment_id, "n": n, "slope": trend.slope,
                           "p_negative": trend.p_negative, "p_positive": trend.p_positive,
                           "p_two_sided": trend.p_two_sided})
    if ctx.out_dir is not None:
        write_csv(Path(ctx.out_dir) / "positional.csv", positional,
                  ["experiment_id", "n", "position", "coverage", "n_trials"])
        write_csv(Path(ctx.out_dir) / "trend.csv", trends,
                  ["experiment_id", "n", "slope", "p_negative", "p_positive", "p_two_sided"])
    result.details = details
    return result


def build_compound_trials(ctx: ExperimentContext, compounds: Sequence[tuple[str, str, str]],
                          controls: Sequence[str], group_size: int, rounds: int) -> list[TrialSpec]:
    if group_size < 1 or group_size > min(len(compounds), len(controls)):
        raise ExperimentError("group_size must be between 1 and the size of each word list")
    words = [(c[0], "compound") for c in compounds] + [(w, "control") for w in controls]
    specs = []
    for r in range(rounds):
        order = list(words)
        random.Random(f"{ctx.seed}/compound/{r}").shuffle(order)
        usable = len(order) - len(order) % group_size
        if usable < len(order):
            logger.warning("dropping %d words that do not fill a group", len(order) - usable)
        for g in range(0, usable, group_size):
            chunk = order[g:g + group_size]
            specs.append(TrialSpec(len(specs), tuple(w for w, _ in chunk), {"round": r}, ctx.strategy,
                                   ctx.params, meta={"kinds": [k for _, k in chunk]}))
    return specs


def run_compound_experiment(ctx: ExperimentContext, compounds: Sequence[tuple[str, str, str]],
                            controls: Sequence[str], group_size: int = 5, rounds: int = 1,
                            lexicon: Optional[Sequence[str]] = None) -> ExperimentResult:
    """Mix compound and control words into fixed-size keyword sets.

    ``split_rate`` is the share of compounds written split among those the
    output mentions at all (intact or split). ``split_share_of_failures`` is
    the share of unsatisfied compounds that were split. ``lexicon`` defaults
    to the annotated constituent parts.
    """
    result = _finish(ctx, build_compound_trials(ctx, compounds, controls, group_size, rounds))
    if ctx.dry_run:
        return result
    lex = list(lexicon) if lexicon is not None else sorted({p for _, a, b in compounds for p in (a, b)})
    hits = {"compound": 0, "control": 0}
    totals = {"compound": 0, "control": 0}
    missed = splits = 0
    for rec in result.records:
        text = normalize_and_tokenize(rec["outcome"]["final_text"], ctx.policy)
        X = KeywordSet.of([k["surface"] for k in rec["keywords"]], ctx.policy)
        for kw, ok, kind in zip(X, rec["outcome"]["satisfied"], rec["meta"]["kinds"]):
            totals[kind] += 1
            hits[kind] += ok
            if kind == "compound" and not ok:
                missed += 1
                splits += detect_compound_split(kw, text, lex) is not None
    details = {
        "compound_coverage": hits["compound"] / totals["compound"] if totals["compound"] else float("nan"),
        "control_coverage": hits["control"] / totals["control"] if totals["control"] else float("nan"),
        "split_rate": splits / (hits["compound"] + splits) if hits["compound"] + splits else 0.0,
        "split_share_of_failures": splits / missed if missed else 0.0,
        "n_compound": totals["compound"],
        "n_control": totals["control"],
        "n_unsatisfied_compound": missed,
        "n_split": splits,
    }
    if ctx.out_dir is not None:
        write_csv(Path(ctx.out_dir) / "compound.csv", [{"experiment_id": ctx.experiment_id, **details}])
    result.details = details
    return result


def run_compound_files(ctx: ExperimentContext, compound_path: str, control_path: str, limit: int = 200,
                       **kw) -> ExperimentResult:
    compounds = load_compounds(compound_path)[:limit]
    controls = load_pool(control_path, ctx.policy)[:limit]
    return run_compound_experiment(ctx, compounds, controls, **kw)


def build_sweep_trials(ctx: ExperimentContext, source: KeywordSource, grids: dict[str, Sequence],
                       n_instances: int, m: int) -> list[TrialSpec]:
    try:
        items = source.sets(m, n_instances, ctx.policy)
    except SourceError as e:
        raise ExperimentError(f"configuration error: {e}") from e
    specs = []
    for param, values in grids.items():
        if param == "top_k" and not getattr(ctx.backend, "supports_top_k", False):
            logger.warning("backend %s does not expose top_k; skipping that grid", ctx.backend.backend_id)
            continue
        if param not in ("temperature", "top_k", "top_p"):
            raise ExperimentError(f"unknown decoding parameter {param!r}")
        for v in values:
            params = ctx.params.replace(**{param: v})
            for j, item in enumerate(items):
                specs.append(TrialSpec(len(specs), item.keywords, {"param": param, "value": v}, ctx.strategy,
                                       params, item.context, meta={"instance": j}))
    return specs


def run_decoding_sweep(ctx: ExperimentContext, source: KeywordSource, grids: Optional[dict] = None,
                       n_instances: int = 150, m: int = 10) -> ExperimentResult:
    """Evaluate the same ``n_instances`` keyword sets at every grid point.

    Each grid varies one decoding parameter with the others held at
    ``ctx.params``. Writes per-instance cells and per-point means as CSV.
    """
    if grids is None:
        grids = {"temperature": TEMPERATURE_GRID, "top_k": TOP_K_GRID, "top_p": TOP_P_GRID}
    result = _finish(ctx, build_sweep_trials(ctx, source, grids, n_instances, m))
    if ctx.dry_run:
        return result
    cells, points = [], OrderedDict()
    for rec in result.records:
        g = rec["group"]
        cov = rec["metrics"]["keyword_coverage"]
        cells.append({"param": g["param"], "value": g["value"], "instance": rec["meta"]["instance"],
                      "coverage": cov})
        points.setdefault((g["param"], g["value"]), []).append(cov)
    grid = [{"param": p, "value": v, "n_instances": len(c), "mean_coverage": float(np.mean(c))}
            for (p, v), c in points.items()]
    if ctx.out_dir is not None:
        write_csv(Path(ctx.out_dir) / "sweep_cells.csv", cells, ["param", "value", "instance", "coverage"])
        write_csv(Path(ctx.out_dir) / "sweep_grid.csv", grid, ["param", "value", "n_instances", "mean_coverage"])
    result.details = {"grid": grid, "cells": cells}
    return result


def run_downstream(ctx: ExperimentContext, task: str, n_list: Optional[Sequence[int]] = None,
                   n_sets: int = 100, source: Optional[KeywordSource] = None,
                   params: Optional[DecodingParams] = None) -> ExperimentResult:
    if task not in DOWNSTREAM_TASKS:
        raise ExperimentError(f"unknown task {task!r}; expected one of {sorted(DOWNSTREAM_TASKS)}")
    tpl_name, default_source, default_n = DOWNSTREAM_TASKS[task]
    source = source or replace(default_source, seed=ctx.seed)
    tpl = load_template(tpl_name, ctx.templates_dir)
    params = params or DOWNSTREAM_PARAMS
    specs = []
    try:
        for n in n_list or default_n:
            for j, item in enumerate(source.sets(n, n_sets, ctx.policy)):
                specs.append(TrialSpec(len(specs), item.keywords, {"task": task, "n": n}, ctx.strategy, params,
                                       item.context, template=tpl, meta={"set": j}))
    except (SourceError, FileNotFoundError) as e:
        raise ExperimentError(f"missing or unusable task data: {e}") from e
    return _finish(ctx, specs)


def run_strategy_comparison(ctx: ExperimentContext, source: KeywordSource, m: int = 15,
                            K_list: Sequence[int] = (0, 1, 2, 3, 4, 5), n_sets: int = 100,
                            strategies: Sequence[str] = ("rj", "dnc")) -> ExperimentResult:
    """Error rate per strategy and iteration budget on the same keyword sets."""
    if not K_list:
        raise ExperimentError("K_list must not be empty")
    try:
        items = source.sets(m, n_sets, ctx.policy)
    except SourceError as e:
        raise ExperimentError(f"configuration error: {e}") from e
    specs = []
    for sid in strategies:
        for K in K_list:
            spec = StrategySpec(sid, K, ctx.strategy.merge_mode)
            for j, item in enumerate(items):
                specs.append(TrialSpec(len(specs), item.keywords, {"strategy": sid, "K": K}, spec, ctx.params,
                                       item.context, meta={"set": j}, seed_key=j))
    result = _finish(ctx, specs)
    if ctx.dry_run:
        return result
    backend = getattr(ctx.backend, "inner", ctx.backend)
    oracle_cfg = backend.cfg if isinstance(backend, SyntheticBackend) and backend.cfg.independent else None
    curves = []
    for row in result.summary:
        sid, K = row["group"].split(";")
        sid, K = sid.split("=")[1], int(K.split("=")[1])
        entry = {"experiment_id": ctx.experiment_id, "strategy": sid, "K": K, "n_trials": row["n_trials"],
                 "error_rate": 1 - row["mean_success"], "ci_low": 1 - row["ci_high"], "ci_high": 1 - row["ci_low"]}
        if oracle_cfg is not None:
            entry["implied_error_rate"] = 1 - implied_instance_success(oracle_cfg, m, sid, K)
        curves.append(entry)
    if ctx.out_dir is not None:
        header = ["experiment_id", "strategy", "K", "n_trials", "error_rate", "ci_low", "ci_high"]
        if oracle_cfg is not None:
            header.append("implied_error_rate")
        write_csv(Path(ctx.out_dir) / "error_curves.csv", curves, header)
    result.details = {"curves": curves}
    return result


def dry_run_prompts(specs: Iterable[TrialSpec], ctx: ExperimentContext) -> Iterable[str]:
    """First-call prompt of each trial, rendered without touching the backend."""
    for spec in specs:
        X = KeywordSet.of(spec.keywords, ctx.policy)
        yield (spec.template or ctx.template).render(X, spec.context)
