"""Prompt templates and the vanilla / rejection-sampling / divide-and-conquer strategies."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .backend import Backend, BackendError, DecodingParams, GenerationRequest
from .constraints import KeywordSet, missing_keywords, normalize_and_tokenize, satisfied_flags

MERGE_MODES = ("concat", "llm_rewrite")
STRATEGY_IDS = ("vanilla", "rj", "dnc")
BUILTIN_TEMPLATES = ("sentence", "recipe", "table_to_text", "profile", "quality_eval", "dnc_rewrite")
KEYWORD_TEMPLATES = ("sentence", "recipe", "table_to_text", "profile")


class TemplateError(ValueError):
    pass


class StrategyAborted(RuntimeError):
    """A backend call failed mid-strategy; ``trace`` holds the steps completed so far."""

    def __init__(self, strategy_id: str, keywords: Sequence[str], trace: Sequence["TraceStep"],
                 cause: BaseException):
        super().__init__(f"{strategy_id} aborted after {len(trace)} calls: {cause}")
        self.strategy_id = strategy_id
        self.keywords = tuple(keywords)
        self.trace = tuple(trace)
        self.cause = cause


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    preamble: str
    keyword_joiner: str = ", "
    examples: str = ""

    def __post_init__(self):
        n = self.preamble.count("{keywords}")
        if n != 1:
            raise TemplateError(f"template {self.name!r} needs exactly one {{keywords}} placeholder, found {n}")

    def render(self, X: KeywordSet, context: str = "") -> str:
        if not X:
            raise TemplateError("cannot render a prompt for an empty keyword set")
        return (
            self.preamble.replace("{examples}", self.examples)
            .replace("{context}", context)
            .replace("{keywords}", self.keyword_joiner.join(X.surfaces))
        )


DEFAULT_TEMPLATE = PromptTemplate("sentence", "Generate a sentence with the following keywords: {keywords}.")


def render_prompt(tpl: PromptTemplate, X: KeywordSet, context: str = "") -> str:
    return tpl.render(X, context)


def _parse_template_file(text: str) -> tuple[dict, str]:
    directives = {}
    lines = text.splitlines(keepends=True)
    while lines and lines[0].startswith("#!"):
        key, _, value = lines.pop(0)[2:].partition(":")
        directives[key.strip()] = json.loads(value.strip())
    body = "".join(lines)
    if body.endswith("\n"):
        body = body[:-1]
    return directives, body


def _template_text(name: str, templates_dir: Optional[str | Path], suffix: str = ".txt") -> Optional[str]:
    if templates_dir is not None:
        path = Path(templates_dir) / f"{name}{suffix}"
        if path.exists():
            return path.read_text(encoding="utf-8")
    res = resources.files("lexcon") / "templates" / f"{name}{suffix}"
    if res.is_file():
        return res.read_text(encoding="utf-8")
    return None


def load_template_text(name: str, templates_dir: Optional[str | Path] = None) -> str:
    text = _template_text(name, templates_dir)
    if text is None:
        raise TemplateError(f"unknown template {name!r}")
    return _parse_template_file(text)[1]


def load_template(name: str, templates_dir: Optional[str | Path] = None,
                  joiner: Optional[str] = None) -> PromptTemplate:
    """Load ``<name>.txt`` (and ``<name>.examples.txt`` few-shot exemplars, if any).

    A user ``templates_dir`` shadows the built-ins. Leading ``#! key: <json>``
    lines set options; currently only ``joiner``.
    """
    text = _template_text(name, templates_dir)
    if text is None:
        raise TemplateError(f"unknown template {name!r}")
    directives, body = _parse_template_file(text)
    examples = _template_text(name, templates_dir, ".examples.txt") or ""
    return PromptTemplate(name, body, joiner if joiner is not None else directives.get("joiner", ", "), examples)


def list_templates(templates_dir: Optional[str | Path] = None) -> list[str]:
    names = set(BUILTIN_TEMPLATES)
    if templates_dir is not None and Path(templates_dir).is_dir():
        names |= {p.stem for p in Path(templates_dir).glob("*.txt") if not p.stem.endswith(".examples")}
    return sorted(names)


@dataclass(frozen=True)
class TraceStep:
    iteration: int
    prompt: str
    response: str
    newly_satisfied: tuple[str, ...]
    merge: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"iteration": self.iteration, "prompt": self.prompt, "response": self.response,
             "newly_satisfied": list(self.newly_satisfied)}
        if self.merge is not None:
            d["merge"] = self.merge
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TraceStep":
        return cls(d["iteration"], d["prompt"], d["response"], tuple(d["newly_satisfied"]), d.get("merge"))


@dataclass(frozen=True)
class StrategyOutcome:
    strategy_id: str
    final_text: str
    keywords: tuple[str, ...]
    satisfied: tuple[bool, ...]
    iterations_used: int
    trace: tuple[TraceStep, ...]
    terminated_by: str
    merge_calls: int = 0

    @property
    def all_satisfied(self) -> bool:
        return all(self.satisfied)

    @property
    def satisfied_keywords(self) -> list[str]:
        return [k for k, ok in zip(self.keywords, self.satisfied) if ok]

    def to_dict(self) -> dict:
        return {
            "strategy_id": self.strategy_id,
            "final_text": self.final_text,
            "keywords": list(self.keywords),
            "satisfied": list(self.satisfied),
            "iterations_used": self.iterations_used,
            "terminated_by": self.terminated_by,
            "merge_calls": self.merge_calls,
            "trace": [s.to_dict() for s in self.trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyOutcome":
        return cls(d["strategy_id"], d["final_text"], tuple(d["keywords"]), tuple(d["satisfied"]),
                   d["iterations_used"], tuple(TraceStep.from_dict(s) for s in d["trace"]),
                   d["terminated_by"], d.get("merge_calls", 0))


def _empty_outcome(strategy_id: str) -> StrategyOutcome:
    return StrategyOutcome(strategy_id, "", (), (), 0, (), "all_satisfied")


def _generate(backend: Backend, prompt: str, X: KeywordSet, params: DecodingParams, attempt: int,
              model_id: str) -> str:
    req = GenerationRequest.from_prompt(prompt, params=params, model_id=model_id,
                                        keywords=tuple(X.surfaces), attempt=attempt)
    return backend.generate(req).text


def vanilla_generate(backend: Backend, tpl: PromptTemplate, X: KeywordSet,
                     params: DecodingParams = DecodingParams(), *, context: str = "",
                     model_id: str = "") -> StrategyOutcome:
    try:
        outcome = rejection_sampling(backend, tpl, X, params, 0, context=context, model_id=model_id)
    except StrategyAborted as e:
        raise StrategyAborted("vanilla", e.keywords, e.trace, e.cause) from e.cause
    return StrategyOutcome("vanilla", outcome.final_text, outcome.keywords, outcome.satisfied,
                           outcome.iterations_used, outcome.trace, outcome.terminated_by)


def rejection_sampling(backend: Backend, tpl: PromptTemplate, X: KeywordSet,
                       params: DecodingParams = DecodingParams(), K: int = 0, *, context: str = "",
                       model_id: str = "") -> StrategyOutcome:
    """Up to K+1 independent full-prompt attempts.

    Returns the first attempt covering every keyword, otherwise the attempt
    with the highest coverage (earliest on ties). Each trace step lists what
    that attempt covered on its own.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if not X:
        return _empty_outcome("rj")
    prompt = tpl.render(X, context)
    trace: list[TraceStep] = []
    best: Optional[tuple[int, str, list[bool]]] = None
    for t in range(K + 1):
        try:
            text = _generate(backend, prompt, X, params, t, model_id)
        except BackendError as e:
            raise StrategyAborted("rj", X.surfaces, trace, e) from e
        flags = satisfied_flags(X, normalize_and_tokenize(text, X.policy))
        trace.append(TraceStep(t + 1, prompt, text, tuple(k for k, ok in zip(X.surfaces, flags) if ok)))
        if all(flags):
            return StrategyOutcome("rj", text, tuple(X.surfaces), tuple(flags), t + 1, tuple(trace),
                                   "all_satisfied")
        if best is None or sum(flags) > best[0]:
            best = (sum(flags), text, flags)
    assert best is not None
    return StrategyOutcome("rj", best[1], tuple(X.surfaces), tuple(best[2]), K + 1, tuple(trace),
                           "budget_exhausted")


def concat(s: str, s_new: str) -> str:
    if not s:
        return s_new
    if not s_new:
        return s
    return f"{s} {s_new}"


def merge_with_info(s: str, s_new: str, merge_mode: str = "concat", backend: Optional[Backend] = None, *,
                    keep: Optional[KeywordSet] = None, rewrite_template: Optional[str] = None,
                    params: DecodingParams = DecodingParams(), attempt: int = 0,
                    model_id: str = "") -> tuple[str, str, int]:
    """Merge and report how: returns ``(text, method, rewrite_calls)``.

    ``method`` is ``concat``, ``llm_rewrite`` or ``concat_fallback`` (the
    rewrite dropped one of the ``keep`` keywords).
    """
    if merge_mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {merge_mode!r}")
    joined = concat(s, s_new)
    if merge_mode == "concat" or not s:
        return joined, "concat", 0
    if backend is None:
        raise ValueError("llm_rewrite merge needs a backend")
    keep = keep if keep is not None else KeywordSet()
    tpl = rewrite_template if rewrite_template is not None else load_template_text("dnc_rewrite")
    prompt = tpl.replace("{keywords}", ", ".join(keep.surfaces)).replace("{text}", joined)
    req = GenerationRequest.from_prompt(prompt, params=params, model_id=model_id, keywords=tuple(keep.surfaces),
                                        attempt=attempt, purpose="rewrite", source_text=joined)
    rewritten = backend.generate(req).text
    if missing_keywords(keep, normalize_and_tokenize(rewritten, keep.policy)):
        return joined, "concat_fallback", 1
    return rewritten, "llm_rewrite", 1


def merge(s: str, s_new: str, merge_mode: str = "concat", backend: Optional[Backend] = None,
          **kw) -> str:
    return merge_with_info(s, s_new, merge_mode, backend, **kw)[0]


def dnc_generate(backend: Backend, tpl: PromptTemplate, X: KeywordSet,
                 params: DecodingParams = DecodingParams(), K: int = 4, merge_mode: str = "concat", *,
                 context: str = "", model_id: str = "",
                 rewrite_template: Optional[str] = None) -> StrategyOutcome:
    """Divide-and-conquer generation.

    Each round prompts with only the still-missing keywords, credits the
    keywords found in that round's response, and merges the response into
    the running text. Stops when nothing is missing or after K+1 generation
    calls. Final flags are re-checked against the merged text.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if merge_mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {merge_mode!r}")
    if not X:
        return _empty_outcome("dnc")
    s = ""
    missing = X
    trace: list[TraceStep] = []
    rewrites = 0
    for t in range(K + 1):
        if not missing:
            break
        prompt = tpl.render(missing, context)
        try:
            s_new = _generate(backend, prompt, missing, params, t, model_id)
            still_missing = missing_keywords(missing, normalize_and_tokenize(s_new, X.policy))
            newly = [kw for kw in missing if kw not in set(still_missing)]
            keep = X.subset(kw for kw in X if kw not in set(still_missing))
            s, how, n = merge_with_info(s, s_new, merge_mode, backend, keep=keep,
                                        rewrite_template=rewrite_template, params=params,
                                        attempt=t, model_id=model_id)
        except BackendError as e:
            raise StrategyAborted("dnc", X.surfaces, trace, e) from e
        rewrites += n
        trace.append(TraceStep(t + 1, prompt, s_new, tuple(kw.surface for kw in newly), how))
        missing = still_missing
    flags = satisfied_flags(X, normalize_and_tokenize(s, X.policy))
    return StrategyOutcome("dnc", s, tuple(X.surfaces), tuple(flags), len(trace), tuple(trace),
                           "all_satisfied" if not missing else "budget_exhausted", rewrites)


@dataclass(frozen=True)
class StrategySpec:
    """Which strategy to run and with what budget; ``K`` counts extra calls."""

    id: str = "vanilla"
    K: int = 0
    merge_mode: str = "concat"

    def __post_init__(self):
        if self.id not in STRATEGY_IDS:
            raise ValueError(f"unknown strategy {self.id!r}")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {self.merge_mode!r}")

    @property
    def label(self) -> str:
        return self.id if self.id == "vanilla" else f"{self.id}-{self.K}"

    def run(self, backend: Backend, tpl: PromptTemplate, X: KeywordSet, params: DecodingParams, *,
            context: str = "", model_id: str = "") -> StrategyOutcome:
        if self.id == "vanilla":
            return vanilla_generate(backend, tpl, X, params, context=context, model_id=model_id)
        if self.id == "rj":
            return rejection_sampling(backend, tpl, X, params, self.K, context=context, model_id=model_id)
        return dnc_generate(backend, tpl, X, params, self.K, self.merge_mode, context=context,
                            model_id=model_id)


# -- quality scoring ---------------------------------------------------------

QUALITY_CRITERIA = ("coherence", "fluency", "readability")


class QualityParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class QualityScores:
    coherence: int
    fluency: int
    readability: int
    raw: str = field(default="", compare=False)


def parse_quality_scores(raw: str) -> QualityScores:
    scores = {}
    for name in QUALITY_CRITERIA:
        m = re.search(rf"\b{name}\b\W{{0,6}}(?:score\W{{0,3}})?(\d+(?:\.\d+)?)\s*(?:/\s*5)?", raw, re.I)
        if not m:
            raise QualityParseError(f"no {name} score in judge output", raw)
        value = float(m.group(1))
        if not value.is_integer() or not 1 <= value <= 5:
            raise QualityParseError(f"{name} score {m.group(1)} outside 1..5", raw)
        scores[name] = int(value)
    return QualityScores(raw=raw, **scores)


def llm_quality_eval(text: str, judge_backend: Backend, example: str, *,
                     params: DecodingParams = DecodingParams.greedy(), model_id: str = "",
                     templates_dir: Optional[str | Path] = None) -> QualityScores:
    """Score ``text`` with a judge model, one-shot (``example`` is a worked evaluation)."""
    tpl = load_template_text("quality_eval", templates_dir)
    prompt = tpl.replace("{example}", example).replace("{text}", text)
    req = GenerationRequest.from_prompt(prompt, params=params, model_id=model_id, purpose="judge",
                                        source_text=text)
    return parse_quality_scores(judge_backend.generate(req).text)
