"""Run configuration: one strict JSON document covering every pipeline stage."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from cfa.chipforge import SceneSpec
from cfa.evalsuite import CONDITIONS
from cfa.trainer import TrainConfig

# Calibrated for the default 64x64, 4-class scene; not prescribed by the method.
BASELINE_DEFAULTS = {"stage": "baseline", "epochs": 30, "lr": 0.01}
CFA_DEFAULTS = {"stage": "cfa", "epochs": 40, "lr": 0.01, "grad_clip": 1.0, "lambda": 1.0}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending JSON path."""


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambdas: list[float] = [0.0, 0.5, 1.0, 2.0]
    ps: list[float] = [0.0, 0.5, 0.8, 1.0]
    mode: Literal["curves", "grid"] = "curves"
    lambda_sweep_p: float = Field(0.5, ge=0, le=1)
    p_sweep_lambda: float = Field(1.0, ge=0)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    runs: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    conditions: list[str] = list(CONDITIONS)
    cosine_perturbation: str = "scene_clutter"
    saliency_chips: list[int] = [0, 1, 2, 3]
    grid: GridConfig = GridConfig()

    @model_validator(mode="after")
    def _known(self):
        bad = [c for c in self.conditions if c not in CONDITIONS]
        if bad:
            raise ValueError(f"unknown conditions {bad}")
        return self


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    out: str = "cfa_run"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scene: SceneSpec = SceneSpec()
    baseline: TrainConfig = TrainConfig(**BASELINE_DEFAULTS)
    cfa: TrainConfig = TrainConfig(**CFA_DEFAULTS)
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()
    log: Literal["debug", "info", "warning", "error"] = "info"

    @model_validator(mode="before")
    @classmethod
    def _stage_defaults(cls, data):
        # partial stage sections are layered over the stage's own defaults
        if isinstance(data, dict):
            data = dict(data)
            for key, defaults in (("baseline", BASELINE_DEFAULTS), ("cfa", CFA_DEFAULTS)):
                section = data.get(key)
                if isinstance(section, dict):
                    merged = dict(defaults)
                    if "lam" in section:
                        merged.pop("lambda", None)
                    merged.update(section)
                    data[key] = merged
        return data

    @model_validator(mode="after")
    def _stages(self):
        if self.baseline.stage != "baseline":
            raise ValueError("baseline.stage must be 'baseline'")
        if self.cfa.stage != "cfa":
            raise ValueError("cfa.stage must be 'cfa'")
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, indent=2)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def parse_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON ({exc})") from None
    return parse_config_dict(data)
