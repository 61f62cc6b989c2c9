"""Scenario files: schema, validation with path-qualified errors, presets, round-trip.

Scenarios are YAML documents.  Parsing collects every problem it can find before
failing, so a broken file reports all of its errors at once.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, \
    model_validator

from .engine import SimulationConfig
from .functions import PairFunction, TraitFunction
from .kernels import KernelSet
from .population import TestFunction
from .scaling import MutationScaling, ScalingFamily
from .traits import ConfigurationError, TraitSpace

CHECKS = ("exp-martingale", "limit-martingale", "quadratic-variation", "jump-census",
          "laplace", "moment", "mean-flow")
FAMILY_PRESETS = ("single_offspring", "beta_stable", "jackpot", "deterministic")
# substream index reserved for sampling initial traits (disjoint from replicate ids)
INITIAL_STREAM = 1 << 40


class ScenarioError(ConfigurationError):
    """All validation problems of a scenario, each prefixed with its config path."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpaceModel(_Model):
    """Box bounds default to the unit interval."""

    kind: Literal["box", "finite"] = "box"
    lower: list[float] | None = None
    upper: list[float] | None = None
    labels: list[str] | None = None

    @model_validator(mode="after")
    def _defaults(self):
        if self.kind == "box" and self.lower is None and self.upper is None:
            self.lower, self.upper = [0.0], [1.0]
        return self


class MutationModel(_Model):
    preset: Literal["none", "gaussian", "pareto", "two_trait", "matrix"] = "none"
    theta: float | None = None
    std_exponent: float | None = None
    gamma: float | None = None
    shift_exponent: float | None = None
    beta: float | None = None
    eta: float | None = None
    q: list[float] | None = None
    normalize: bool | None = None
    matrix: list[list[float]] | None = None

    @field_validator("beta")
    @classmethod
    def _pareto_index(cls, v):
        if v is not None and not (1.0 < v < 2.0):
            raise ValueError("pareto index must lie in (1,2)")
        return v

    @field_validator("q")
    @classmethod
    def _probabilities(cls, v):
        if v is not None and any(not (0.0 <= x <= 1.0) for x in v):
            raise ValueError("switch probabilities must lie in [0,1]")
        return v


class FamilyModel(_Model):
    preset: str
    b: Any = None
    sigma: Any = None
    gamma: Any = None
    d0: Any = None
    d: Any = None
    beta: float | None = None
    kmax: int | None = Field(default=None, ge=1)
    kappa: float | None = None
    intensity: Any = None
    intensity_exponent: float | None = None
    competition: Any = None
    mutation_prob: Any = None
    mutation: MutationModel | None = None

    @field_validator("preset")
    @classmethod
    def _known(cls, v):
        if v not in FAMILY_PRESETS:
            raise ValueError(f"unknown family preset {v!r} (expected one of "
                             f"{', '.join(FAMILY_PRESETS)})")
        return v

    @field_validator("beta")
    @classmethod
    def _beta(cls, v):
        if v is not None and not (0.0 < v <= 1.0):
            raise ValueError("β must lie in (0,1]")
        return v

    @field_validator("kappa")
    @classmethod
    def _kappa(cls, v):
        if v is not None and v < 1.0:
            raise ValueError("mean offspring kappa must be >= 1")
        return v


class AtomModel(_Model):
    trait: Any
    mass: float | None = Field(default=None, ge=0)
    count: int | None = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _one_size(self):
        if (self.mass is None) == (self.count is None):
            raise ValueError("give exactly one of mass or count")
        return self


class SamplerModel(_Model):
    kind: Literal["uniform"] = "uniform"
    atoms: int = Field(ge=1)
    mass: float = Field(gt=0)


class InitialModel(_Model):
    atoms: list[AtomModel] | None = None
    sampler: SamplerModel | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.atoms is None) == (self.sampler is None):
            raise ValueError("give exactly one of atoms or sampler")
        return self


class DiagnosticModel(_Model):
    check: str
    phi: Any = 1.0
    times: list[float] | None = None
    eps: float | None = Field(default=None, gt=0)
    q: int | None = Field(default=None, ge=1)
    threshold: float = Field(default=3.0, gt=0)
    tolerance: float | None = Field(default=None, gt=0)

    @field_validator("check")
    @classmethod
    def _known(cls, v):
        if v not in CHECKS:
            raise ValueError(f"unknown check {v!r} (expected one of {', '.join(CHECKS)})")
        return v


class ScenarioModel(_Model):
    name: str = "scenario"
    family: FamilyModel
    space: SpaceModel = Field(default_factory=SpaceModel)
    initial: InitialModel
    K: float | None = Field(default=None, gt=0)
    K_list: list[float] | None = None
    horizon: float = Field(ge=0)
    snapshot_times: list[float] | None = None
    replicates: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    explosion_cap: int = Field(default=10 ** 7, ge=1)
    record_events: bool = False
    record_atoms: bool = True
    diagnostics: list[DiagnosticModel] = Field(default_factory=list)
    output: str = "out"

    @field_validator("K_list")
    @classmethod
    def _increasing(cls, v):
        if v is None:
            return v
        if len(v) == 0:
            raise ValueError("K_list must not be empty")
        if any(k <= 0 for k in v):
            raise ValueError("K_list entries must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("K_list not increasing")
        return v

    @field_validator("snapshot_times")
    @classmethod
    def _sorted(cls, v):
        if v is not None and any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("snapshot times must be sorted")
        return v

    @model_validator(mode="after")
    def _sizes(self):
        if self.K is None and self.K_list is None:
            raise ValueError("give K or K_list")
        if self.K is not None and self.K_list is not None:
            raise ValueError("give only one of K and K_list")
        return self


def _format_pydantic(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        for prefix in ("Value error, ", "Assertion failed, "):
            if msg.startswith(prefix):
                msg = msg[len(prefix):]
        out.append(f"{loc}: {msg}")
    return out


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "logistic": {
        "name": "logistic",
        "family": {"preset": "deterministic", "b": [1.0, {"kind": "gaussian", "amp": 1.0,
                                                           "center": [0.5], "width": 0.3}],
                   "d": 0.5, "kappa": 1.0,
                   "competition": {"kind": "gaussian", "amp": 1.0, "width": 0.5},
                   "mutation_prob": 0.1, "mutation": {"preset": "gaussian", "theta": 0.05}},
        "space": {"kind": "box", "lower": [0.0], "upper": [1.0]},
        "initial": {"atoms": [{"trait": [0.5], "mass": 1.0}]},
        "K": 100.0, "horizon": 1.0, "snapshot_times": [0.25, 0.5, 1.0],
        "replicates": 100, "seed": 0, "record_events": True,
        "diagnostics": [{"check": "exp-martingale", "phi": 1.0},
                        {"check": "exp-martingale", "phi": "bump"}],
    },
    "feller": {
        "name": "feller",
        "family": {"preset": "single_offspring", "b": 0.0, "sigma": 1.0},
        "space": {"kind": "box", "lower": [0.0], "upper": [1.0]},
        "initial": {"atoms": [{"trait": [0.5], "mass": 1.0}]},
        "K": 200.0, "horizon": 1.0, "snapshot_times": [0.25, 0.5, 1.0],
        "replicates": 100, "seed": 0, "record_events": True,
        "diagnostics": [{"check": "exp-martingale", "phi": 1.0},
                        {"check": "laplace", "phi": 1.0, "times": [1.0]}],
    },
    "beta_census": {
        "name": "beta_census",
        "family": {"preset": "beta_stable", "beta": 0.5, "gamma": 1.0, "d0": 0.0},
        "space": {"kind": "box", "lower": [0.0], "upper": [1.0]},
        "initial": {"atoms": [{"trait": [0.5], "mass": 1.0}]},
        "K": 1000.0, "horizon": 1.0, "replicates": 100, "seed": 0, "record_events": True,
        "explosion_cap": 10 ** 6,
        "diagnostics": [{"check": "jump-census", "eps": 0.1}],
    },
    "two_trait": {
        "name": "two_trait",
        "family": {"preset": "deterministic", "b": 1.0, "d": 1.0, "mutation_prob": 1.0,
                   "mutation": {"preset": "two_trait", "q": [0.2, 0.2]}},
        "space": {"kind": "finite", "labels": ["x1", "x2"]},
        "initial": {"atoms": [{"trait": "x1", "mass": 1.0}]},
        "K": 100.0, "horizon": 1.0, "snapshot_times": [0.25, 0.5, 1.0],
        "replicates": 100, "seed": 0, "record_events": True,
        "diagnostics": [{"check": "mean-flow"}],
    },
    "deterministic": {
        "name": "deterministic",
        "family": {"preset": "deterministic", "b": 2.0, "d": 1.0, "competition": 1.0},
        "space": {"kind": "box", "lower": [0.0], "upper": [1.0]},
        "initial": {"atoms": [{"trait": [0.5], "mass": 0.1}]},
        "K": 10000.0, "horizon": 5.0,
        "snapshot_times": [round(0.1 * i, 10) for i in range(51)],
        "replicates": 100, "seed": 0,
        "diagnostics": [{"check": "moment", "q": 1}],
    },
}


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagnosticSpec:
    check: str
    phi: TestFunction
    times: tuple[float, ...] | None
    eps: float | None
    q: int | None
    threshold: float
    tolerance: float | None


@dataclass(frozen=True, eq=False)
class Scenario:
    """Validated scenario.  Equality compares the canonical data tree."""

    data: dict
    family: ScalingFamily
    space: TraitSpace
    diagnostics: tuple[DiagnosticSpec, ...]

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.data == other.data

    def __hash__(self):
        return hash(self.digest())

    # plain fields
    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def K_values(self) -> list[float]:
        return list(self.data["K_list"]) if "K_list" in self.data else [self.data["K"]]

    @property
    def horizon(self) -> float:
        return self.data["horizon"]

    @property
    def replicates(self) -> int:
        return self.data["replicates"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def output(self) -> str:
        return self.data["output"]

    @property
    def snapshot_times(self) -> tuple[float, ...]:
        st = self.data.get("snapshot_times")
        return tuple(st) if st else (0.0, self.horizon)

    def kernels(self, K: float) -> KernelSet:
        return self.family.kernels(K)

    def initial(self, K: float) -> tuple[tuple[np.ndarray, int], ...]:
        """Initial atoms at system size ``K``; masses become ``round(mass * K)`` individuals."""
        init = self.data["initial"]
        if "atoms" in init:
            out = []
            for a in init["atoms"]:
                x = self.space.as_trait(a["trait"])
                k = a["count"] if "count" in a else int(round(a["mass"] * K))
                out.append((x, k))
            return tuple(out)
        s = init["sampler"]
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(self.seed, spawn_key=(INITIAL_STREAM,))))
        X = self.space.probe_points(s["atoms"], rng)
        n = int(round(s["mass"] * K))
        base, extra = divmod(n, s["atoms"])
        return tuple((X[i], base + (1 if i < extra else 0)) for i in range(s["atoms"]))

    def sim_config(self, K: float, **overrides) -> SimulationConfig:
        kw = dict(horizon=self.horizon, snapshot_times=self.snapshot_times,
                  explosion_cap=self.data["explosion_cap"], seed=self.seed,
                  record_events=self.data["record_events"],
                  record_atoms=self.data["record_atoms"])
        kw.update(overrides)
        return SimulationConfig(self.kernels(K), self.initial(K), **kw)

    def with_overrides(self, over: dict) -> "Scenario":
        return _build(_deep_merge(self.data, over))

    def to_text(self) -> str:
        return dump_scenario(self)

    def digest(self) -> str:
        text = json.dumps(self.data, sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()


def _canonical(model: ScenarioModel) -> dict:
    data = model.model_dump(mode="python", exclude_none=True)
    # keep the user's function trees as written; typed leaves are now canonical
    return data


def _build(raw: Any) -> Scenario:
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ScenarioError(["<root>: scenario must be a mapping"])
    raw = dict(raw)
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ScenarioError([f"preset: unknown scenario preset {preset!r} (expected one of "
                                 f"{', '.join(PRESETS)})"])
        raw = _deep_merge(PRESETS[preset], raw)
    try:
        model = ScenarioModel.model_validate(raw)
    except ValidationError as exc:
        errors.extend(_format_pydantic(exc))
        model = None
    # semantic checks run per section so structural errors elsewhere do not hide them
    space_m = _section(SpaceModel, raw.get("space") or {})
    family_m = _section(FamilyModel, raw.get("family"))
    initial_m = _section(InitialModel, raw.get("initial"))
    diag_ms = [_section(DiagnosticModel, d) for d in (raw.get("diagnostics") or [])
               if isinstance(raw.get("diagnostics"), list)]
    space = family = None
    diags: list[DiagnosticSpec] = []
    if space_m is not None:
        space = _build_space(space_m, errors)
    if space is not None:
        if family_m is not None:
            family = _build_family(family_m, space, errors)
        if initial_m is not None:
            _check_initial(initial_m, space, errors)
        diags = _build_diagnostics(diag_ms, space, errors)
    if model is not None:
        if model.snapshot_times and (model.snapshot_times[0] < 0
                                     or model.snapshot_times[-1] > model.horizon):
            errors.append("snapshot_times: times must lie within [0, horizon]")
        if not math.isfinite(model.horizon):
            errors.append("horizon: must be finite")
    if errors:
        raise ScenarioError(errors)
    return Scenario(_canonical(model), family, space, tuple(diags))


def _section(cls, raw):
    try:
        return cls.model_validate(raw)
    except ValidationError:
        return None


def _build_space(m: SpaceModel, errors: list[str]) -> TraitSpace | None:
    try:
        if m.kind == "finite":
            if not m.labels:
                errors.append("space.labels: finite space needs labels")
                return None
            return TraitSpace.finite(m.labels)
        if m.lower is None or m.upper is None:
            errors.append("space: box space needs lower and upper")
            return None
        return TraitSpace.box(m.lower, m.upper)
    except ConfigurationError as exc:
        errors.append(f"space: {exc}")
        return None


def _fn(spec, path, errors, default=0.0):
    try:
        return TraitFunction.from_config(default if spec is None else spec, path)
    except (ConfigurationError, TypeError, KeyError, ValueError) as exc:
        errors.append(f"{path}: {exc}" if not str(exc).startswith(path) else str(exc))
        return None


def _pair(spec, path, errors, default=0.0):
    try:
        return PairFunction.from_config(default if spec is None else spec, path)
    except (ConfigurationError, TypeError, KeyError, ValueError) as exc:
        errors.append(f"{path}: {exc}" if not str(exc).startswith(path) else str(exc))
        return None


def _build_family(m: FamilyModel, space: TraitSpace, errors: list[str]) -> ScalingFamily | None:
    n0 = len(errors)
    keys = {"single_offspring": ("b", "sigma"), "jackpot": ("b", "sigma"),
            "beta_stable": ("gamma", "d0"), "deterministic": ("b", "d")}[m.preset]
    defaults = {"b": 0.0, "sigma": 1.0, "gamma": 1.0, "d0": 0.0, "d": 0.0}
    for k in ("b", "sigma", "gamma", "d0", "d"):
        if getattr(m, k) is not None and k not in keys:
            errors.append(f"family.{k}: not a parameter of the {m.preset} family")
    params = {k: _fn(getattr(m, k), f"family.{k}", errors, defaults[k]) for k in keys}
    comp = _pair(m.competition, "family.competition", errors)
    prob = _fn(m.mutation_prob, "family.mutation_prob", errors)
    if m.preset == "beta_stable" and m.beta is None:
        errors.append("family.beta: beta_stable family needs beta")
    if m.preset == "jackpot" and m.intensity is None:
        errors.append("family.intensity: jackpot family needs an intensity")
    jack = _pair(m.intensity, "family.intensity", errors) if m.intensity is not None else None
    if len(errors) > n0:
        return None
    try:
        comp.check_space(space, "family.competition")
        prob.check_space(space, "family.mutation_prob")
        lo, hi = prob.range_bounds(space)
        if lo < 0 or hi > 1:
            errors.append("family.mutation_prob: values must lie in [0,1]")
        mut = MutationScaling.from_config(
            m.mutation.model_dump(exclude_none=True) if m.mutation else None)
        kw = dict(competition=comp, mutation_prob=prob, mutation=mut)
        if m.preset == "beta_stable":
            kw.update(beta=m.beta, kmax=m.kmax or 10 ** 9)
        if m.preset == "jackpot":
            kw.update(jackpot=jack, jackpot_exponent=m.intensity_exponent or 0.0)
        if m.preset == "deterministic":
            kw.update(kappa=m.kappa if m.kappa is not None else 1.0)
        fam = ScalingFamily(m.preset, space, params, **kw)
        for k, f in fam.params.items():
            f.check_space(space, f"family.{k}")
            if f.range_bounds(space)[0] < 0 and k not in ("b", "d0"):
                errors.append(f"family.{k}: rate must be nonnegative on the trait space")
        if m.preset == "deterministic":
            for k in ("b", "d"):
                if fam.params[k].range_bounds(space)[0] < 0:
                    errors.append(f"family.{k}: rate must be nonnegative on the trait space")
        # the kernel mass/bounds must be valid at some system size
        fam.kernels(100.0)
        return fam if len(errors) == n0 else None
    except ConfigurationError as exc:
        errors.append(f"family: {exc}")
        return None


def _check_initial(init: InitialModel, space: TraitSpace, errors: list[str]) -> None:
    if init.atoms is not None:
        for i, a in enumerate(init.atoms):
            try:
                x = space.as_trait(a.trait)
                if not space.contains(x):
                    errors.append(f"initial.atoms.{i}.trait: lies outside the trait space")
            except (ConfigurationError, ValueError, TypeError) as exc:
                errors.append(f"initial.atoms.{i}.trait: {exc}")
    elif not space.is_finite and not (np.all(np.isfinite(space.lo))
                                      and np.all(np.isfinite(space.hi))):
        errors.append("initial.sampler: uniform sampling needs a bounded trait space")


def _build_diagnostics(models: list, space: TraitSpace,
                       errors: list[str]) -> list[DiagnosticSpec]:
    out = []
    for i, d in enumerate(models):
        if d is None:
            continue
        try:
            phi = TestFunction.preset(d.phi, space)
        except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
            errors.append(f"diagnostics.{i}.phi: {exc}")
            continue
        if d.check == "jump-census" and d.eps is None:
            errors.append(f"diagnostics.{i}.eps: jump census needs a threshold eps")
        if d.check == "mean-flow" and not space.is_finite:
            errors.append(f"diagnostics.{i}.check: mean-flow needs a finite trait space")
        out.append(DiagnosticSpec(d.check, phi, tuple(d.times) if d.times else None, d.eps,
                                  d.q, d.threshold, d.tolerance))
    return out


# ---------------------------------------------------------------------------
# text I/O
# ---------------------------------------------------------------------------

def parse_scenario(text: str) -> Scenario:
    """Parse YAML text into a validated :class:`Scenario`; raises :class:`ScenarioError`."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError([f"<root>: malformed YAML: {exc}"]) from None
    return _build(raw)


def scenario_from_dict(raw: dict) -> Scenario:
    return _build(copy.deepcopy(raw))


def load_scenario(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError([f"<root>: cannot read scenario file {path} ({exc.strerror})"]) \
            from None
    return parse_scenario(text)


def preset_scenario(name: str, **overrides) -> Scenario:
    if name not in PRESETS:
        raise ScenarioError([f"preset: unknown scenario preset {name!r}"])
    return _build(_deep_merge(PRESETS[name], overrides))


def dump_scenario(s: Scenario) -> str:
    """YAML text; floats use the shortest round-trip representation."""
    return yaml.safe_dump(s.data, sort_keys=False, allow_unicode=True)
