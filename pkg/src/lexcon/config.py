"""JSON run configuration: strict schema plus builders for backends and contexts."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .backend import Backend, CachedBackend, DecodingParams, HTTPBackend, ScriptedBackend
from .constraints import MatchPolicy
from .sources import KeywordSource, load_compounds, resolve_path
from .strategies import MERGE_MODES, STRATEGY_IDS, StrategySpec, TemplateError, load_template
from .synthetic import BIAS_MODES, SyntheticBackend, SyntheticModelConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ParamsConfig(_Strict):
    temperature: float = 1.0
    top_k: Optional[int] = None
    top_p: float = 1.0
    max_tokens: int = 256
    greedy: bool = False

    def build(self) -> DecodingParams:
        if self.greedy:
            return DecodingParams.greedy(max_tokens=self.max_tokens)
        return DecodingParams(self.temperature, self.top_k, self.top_p, self.max_tokens)


class SyntheticConfig(_Strict):
    base_coverage: float = 0.8
    bias_mode: Literal[BIAS_MODES] = "none"  # type: ignore[valid-type]
    bias_strength: float = 0.0
    count_decay: float = 1.0
    compound_split_prob: float = 0.0
    seed: int = 0
    compounds: Optional[str] = None

    def build(self) -> SyntheticModelConfig:
        d = self.model_dump(exclude={"compounds"})
        return SyntheticModelConfig(**d)


class BackendConfig(_Strict):
    kind: Literal["http", "scripted", "synthetic"] = "synthetic"
    model_id: str = ""
    base_url: Optional[str] = None
    params: ParamsConfig = ParamsConfig(greedy=True)
    supports_top_k: bool = False
    max_retries: int = 4
    timeout_s: float = 60.0
    max_in_flight: int = 8
    cache_dir: Optional[str] = None
    responses: list[str] = []
    echo: bool = True
    synthetic: SyntheticConfig = SyntheticConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "http" and not self.base_url:
            raise ValueError("http backend needs base_url")
        return self


class StrategyConfig(_Strict):
    id: Literal[STRATEGY_IDS] = "vanilla"  # type: ignore[valid-type]
    K: int = Field(0, ge=0)
    merge_mode: Literal[MERGE_MODES] = "concat"  # type: ignore[valid-type]
    template: str = "sentence"
    templates_dir: Optional[str] = None

    def spec(self) -> StrategySpec:
        return StrategySpec(self.id, self.K, self.merge_mode)


class SourceConfig(_Strict):
    kind: Literal["file_sets", "sampled_pool", "commongen_file"] = "sampled_pool"
    path: str = "bundled:concepts"
    seed: Optional[int] = None

    def build(self, run_seed: int) -> KeywordSource:
        return KeywordSource(self.kind, self.path, self.seed if self.seed is not None else run_seed)


class ConstraintScaling(_Strict):
    name: Literal["constraint_scaling"]
    source: SourceConfig = SourceConfig()
    n_list: list[int] = [3, 5, 7, 10, 15, 20]
    n_sets: int = Field(100, ge=1)


class PositionBias(_Strict):
    name: Literal["position_bias"]
    source: SourceConfig = SourceConfig()
    n_list: list[int] = [3, 5, 7, 10, 15, 20]
    sets_per_n: int = Field(100, ge=1)
    shuffles: int = Field(20, ge=2)
    n_permutations: int = Field(2000, ge=1)


class Compound(_Strict):
    name: Literal["compound"]
    compounds: str = "bundled:compounds"
    controls: str = "bundled:control_words"
    limit: int = Field(200, ge=1)
    group_size: int = Field(5, ge=1)
    rounds: int = Field(1, ge=1)


class DecodingSweep(_Strict):
    name: Literal["decoding_sweep"]
    source: SourceConfig = SourceConfig()
    grids: Optional[dict[Literal["temperature", "top_k", "top_p"], list[float]]] = None
    n_instances: int = Field(150, ge=1)
    m: int = Field(10, ge=1)

    @field_validator("grids")
    @classmethod
    def _ints_for_top_k(cls, v):
        if v and "top_k" in v:
            if any(x != int(x) for x in v["top_k"]):
                raise ValueError("top_k grid values must be integers")
            v = {**v, "top_k": [int(x) for x in v["top_k"]]}
        return v


class Downstream(_Strict):
    name: Literal["downstream"]
    task: Literal["recipe", "table_to_text", "profile"]
    n_list: Optional[list[int]] = None
    n_sets: int = Field(100, ge=1)
    source: Optional[SourceConfig] = None
    params: Optional[ParamsConfig] = None


class StrategyComparison(_Strict):
    name: Literal["strategy_comparison"]
    source: SourceConfig = SourceConfig()
    m: int = Field(15, ge=1)
    K_list: list[int] = Field([0, 1, 2, 3, 4, 5], min_length=1)
    n_sets: int = Field(100, ge=1)
    strategies: list[Literal["rj", "dnc"]] = ["rj", "dnc"]


ExperimentConfig = Annotated[
    Union[ConstraintScaling, PositionBias, Compound, DecodingSweep, Downstream, StrategyComparison],
    Field(discriminator="name"),
]


class PolicyConfig(_Strict):
    case_fold: bool = True
    unicode_normalize: bool = True
    morphological: bool = False

    def build(self) -> MatchPolicy:
        return MatchPolicy(self.case_fold, self.unicode_normalize, self.morphological)


class RunConfig(_Strict):
    experiment_id: Optional[str] = None
    backend: BackendConfig = BackendConfig()
    strategy: StrategyConfig = StrategyConfig()
    experiment: ExperimentConfig
    policy: PolicyConfig = PolicyConfig()
    output_dir: str = "runs"
    parallelism: int = Field(1, ge=1)
    seed: int = 0

    @property
    def run_id(self) -> str:
        return self.experiment_id or self.experiment.name

    @property
    def out_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def _check_files(cfg: RunConfig) -> None:
    try:
        load_template(cfg.strategy.template, cfg.strategy.templates_dir)
    except TemplateError as e:
        raise ConfigError(f"strategy.template: {e}") from None
    paths = []
    exp = cfg.experiment
    for name in ("source",):
        src = getattr(exp, name, None)
        if src is not None:
            paths.append((f"experiment.{name}.path", src.path))
    if isinstance(exp, Compound):
        paths += [("experiment.compounds", exp.compounds), ("experiment.controls", exp.controls)]
    if cfg.backend.synthetic.compounds:
        paths.append(("backend.synthetic.compounds", cfg.backend.synthetic.compounds))
    for key, p in paths:
        if not resolve_path(p).is_file():
            raise ConfigError(f"{key}: file not found: {p}")


def parse_config(data: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None
    _check_files(cfg)
    return cfg


def load_config(path: str | Path, overrides: Optional[dict] = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_config(data)


def build_backend(bc: BackendConfig, compounds_path: Optional[str] = None,
                  policy: MatchPolicy = MatchPolicy()) -> Backend:
    backend: Backend
    if bc.kind == "http":
        backend = HTTPBackend(bc.base_url, bc.model_id, supports_top_k=bc.supports_top_k,
                              max_retries=bc.max_retries, timeout_s=bc.timeout_s,
                              max_in_flight=bc.max_in_flight)
    elif bc.kind == "scripted":
        backend = ScriptedBackend(bc.responses, echo=bc.echo)
    else:
        path = bc.synthetic.compounds or compounds_path
        compounds = {w: (a, b) for w, a, b in load_compounds(path)} if path else None
        backend = SyntheticBackend(bc.synthetic.build(), compounds, policy)
    if bc.cache_dir:
        backend = CachedBackend(backend, bc.cache_dir)
    return backend
