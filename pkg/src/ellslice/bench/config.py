"""Experiment configuration: strict JSON schema with located diagnostics."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator

from ..samplers import KERNEL_DESCRIPTIONS, TUNABLE
from ..targets import TARGET_DESCRIPTIONS

EXPERIMENTS = ("ess-sweep", "double-banana", "gaussian-validate", "assumption-audit", "drift-audit")
CHAIN_EXPERIMENTS = ("ess-sweep", "double-banana", "gaussian-validate", "drift-audit")

DESK_DIMS = [10, 30, 100, 300]
FULL_DIMS = [10, 30, 100, 300, 1000]
FULL_N0, FULL_N = 100_000, 1_000_000


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KernelConfig(_Strict):
    name: str
    param: Optional[float] = None
    tune: bool = False
    target_rate: float = Field(0.25, gt=0.0, lt=1.0)
    max_shrink: int = Field(10_000, ge=1)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in KERNEL_DESCRIPTIONS:
            raise ValueError(f"unknown kernel {v!r} (known: {', '.join(KERNEL_DESCRIPTIONS)})")
        return v

    @model_validator(mode="after")
    def _params(self):
        if self.tune and self.name not in TUNABLE:
            raise ValueError(f"kernel {self.name!r} cannot be tuned")
        if self.param is not None:
            if self.name == "pcn" and not 0.0 < self.param <= 1.0:
                raise ValueError("pcn param s must lie in (0, 1]")
            if self.name == "rwm" and not self.param > 0.0:
                raise ValueError("rwm param sigma must be positive")
            if self.name not in TUNABLE:
                raise ValueError(f"kernel {self.name!r} takes no param")
        return self


class TargetConfig(_Strict):
    name: str
    params: dict = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in TARGET_DESCRIPTIONS:
            raise ValueError(f"unknown target {v!r} (known: {', '.join(TARGET_DESCRIPTIONS)})")
        return v


class HistogramConfig(_Strict):
    bins: tuple[int, int] = (128, 128)
    range: tuple[tuple[float, float], tuple[float, float]] = ((-3.0, 3.0), (-3.0, 3.0))

    @model_validator(mode="after")
    def _check(self):
        if min(self.bins) < 1:
            raise ValueError("bins must be positive")
        for lo, hi in self.range:
            if not lo < hi:
                raise ValueError("histogram range must have lo < hi")
        return self


class BoundsConfig(_Strict):
    kind: Literal["gaussian", "radial-tail", "logistic-tail-shift", "exp-family"]
    params: dict = Field(default_factory=dict)


class AuditConfig(_Strict):
    R: Optional[float] = Field(None, gt=0.0)
    alpha: Optional[float] = Field(None, gt=0.0)
    bounds: Optional[BoundsConfig] = None
    n_centers: int = Field(200, ge=1)
    n_probes: int = Field(500, ge=1)
    expect: Optional[Literal["pass", "fail"]] = None

    @model_validator(mode="after")
    def _constants(self):
        explicit = self.R is not None and self.alpha is not None
        if explicit == (self.bounds is not None):
            raise ValueError("give either both R and alpha, or bounds")
        return self


class DriftConfig(_Strict):
    radii: list[float] = Field(default_factory=lambda: [10.0 * k for k in range(1, 11)])
    reps: int = Field(200, ge=100)
    average_directions: bool = False
    expect_drift: Optional[bool] = None

    @field_validator("radii")
    @classmethod
    def _grid(cls, v):
        if len(v) < 2 or any(r <= 0 for r in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("radii must be a positive increasing grid of at least two points")
        return v


class ExperimentConfig(_Strict):
    experiment: str
    target: TargetConfig
    kernels: list[KernelConfig] = Field(default_factory=list)
    dims: Optional[list[int]] = None
    n0: int = Field(10_000, ge=0)
    n: int = Field(100_000, ge=0)
    thin: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    replicates: int = Field(3, ge=1)
    output_dir: str = "results"
    max_lag: int = Field(10_000, ge=1)
    ess_truncation: Literal["fixed", "geyer"] = "fixed"
    quantity: Literal["log1p-norm"] = "log1p-norm"
    x_init: Optional[list[float]] = None
    write_samples: bool = False
    histogram: HistogramConfig = Field(default_factory=HistogramConfig)
    audit: Optional[AuditConfig] = None
    drift: Optional[DriftConfig] = None
    _dims_explicit: bool = PrivateAttr(False)

    @field_validator("experiment")
    @classmethod
    def _known(cls, v):
        if v not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {v!r} (known: {', '.join(EXPERIMENTS)})")
        return v

    @field_validator("dims")
    @classmethod
    def _dims(cls, v):
        if v is not None:
            if not v:
                raise ValueError("dims must be nonempty")
            if any(d < 1 for d in v):
                raise ValueError("dims must be positive")
        return v

    @model_validator(mode="after")
    def _consistency(self):
        # double banana is two-dimensional whatever the scale
        self._dims_explicit = self.dims is not None or self.experiment == "double-banana"
        if self.experiment in CHAIN_EXPERIMENTS and not self.kernels:
            raise ValueError(f"experiment {self.experiment!r} needs at least one kernel")
        if self.experiment == "double-banana":
            if self.target.name != "double-banana":
                raise ValueError("double-banana experiment needs the double-banana target")
            if self.dims is None:
                self.dims = [2]
            if self.dims != [2]:
                raise ValueError("double-banana runs in dimension 2 only")
        if self.experiment == "assumption-audit" and self.audit is None:
            raise ValueError("assumption-audit needs an 'audit' section")
        if self.experiment == "drift-audit" and self.drift is None:
            self.drift = DriftConfig()
        if self.experiment == "gaussian-validate" and self.target.name != "gaussian":
            raise ValueError("gaussian-validate needs the gaussian target")
        if self.dims is None:
            self.dims = list(DESK_DIMS)
        if self.x_init is not None and any(len(self.x_init) != d for d in self.dims):
            raise ValueError("x_init length must match every entry of dims")
        return self

    def apply_overrides(self, *, full_scale=False, seed=None, output_dir=None) -> "ExperimentConfig":
        upd = {}
        if full_scale:
            upd.update(n0=FULL_N0, n=FULL_N)
            if not self._dims_explicit:
                upd["dims"] = list(FULL_DIMS)
        if seed is not None:
            upd["seed"] = seed
        if output_dir is not None:
            upd["output_dir"] = str(output_dir)
        return self.model_validate({**self.model_dump(), **upd}) if upd else self


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(diagnostics))


def _locate(text: str, err: dict) -> Optional[int]:
    """Best-effort line number for a pydantic error inside the raw JSON."""
    needles = []
    if isinstance(err.get("input"), str):
        needles.append(json.dumps(err["input"]))
    keys = [k for k in err.get("loc", ()) if isinstance(k, str)]
    if keys:
        needles.append(json.dumps(keys[-1]) + r"\s*:")
    for needle in needles:
        m = re.search(needle if needle.endswith(":") else re.escape(needle), text)
        if m:
            return text.count("\n", 0, m.start()) + 1
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{source}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{source}:1: top level must be a JSON object"])
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        diags = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            line = _locate(text, err)
            where = f"{source}:{line}" if line else source
            msg = err["msg"].removeprefix("Value error, ")
            diags.append(f"{where}: {loc}: {msg}")
        raise ConfigError(diags) from None


def validate_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises :class:`ConfigError` with diagnostics."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read: {exc.strerror}"]) from None
    return parse_config(text, str(path))
