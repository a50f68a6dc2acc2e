"""Scenario files (TOML) with a strict schema and a canonical hash."""
import hashlib
import json
import sys
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ScenarioError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

Number = Union[int, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KappaSpec(_Strict):
    """kappa(u, v) = base - decay * |u - v| (scalar type labels)."""

    base: float = 1.0
    decay: float = 0.0


class ModelSpec(_Strict):
    family: Literal["zero", "graphon_linear", "heterogeneous_lq", "lq_forward"]
    params: dict[str, Union[Number, KappaSpec]] = Field(default_factory=dict)


class DistributionSpec(_Strict):
    kind: Literal["uniform", "normal", "discrete"] = "uniform"
    low: float = 0.0
    high: float = 1.0
    mean: float = 0.0
    std: float = 1.0
    labels: Optional[list[Union[int, float, str]]] = None
    probs: Optional[list[float]] = None


class AtlasSpec(_Strict):
    mode: Literal["grid", "iid"] = "grid"
    count: int = Field(1, ge=1)
    distribution: DistributionSpec = Field(default_factory=DistributionSpec)
    seed: int = 0


class GridSpec(_Strict):
    T: float = Field(gt=0)
    steps: int = Field(ge=1)


class InitialSpec(_Strict):
    kind: Literal["gaussian", "dirac", "uniform"] = "gaussian"
    mean: float = 0.0
    std: float = Field(1.0, ge=0)
    low: float = 0.0
    high: float = 1.0
    mean_slope: float = 0.0


class ControlSpec(_Strict):
    kind: Literal["open_loop", "feedback"] = "open_loop"
    features: Literal["x", "x_chi0"] = "x"
    lower: Optional[float] = None
    upper: Optional[float] = None
    initial_gain: float = 0.0
    initial_value: float = 0.0

    @field_validator("upper")
    @classmethod
    def _box(cls, v, info):
        lo = info.data.get("lower")
        if v is not None and lo is not None and lo > v:
            raise ValueError("upper bound below lower bound")
        return v


class SolverSpec(_Strict):
    max_outer: int = Field(20, ge=1)
    tol: float = Field(1e-4, gt=0)
    inner: int = Field(5, ge=1)
    damping: float = Field(1.0, gt=0, le=1)
    basis: Literal["constant", "linear", "linear_chi0", "quadratic"] = "quadratic"
    implicit_iters: int = Field(2, ge=1)
    cap: int = Field(512, ge=2)


class OptimizerSpec(_Strict):
    rate: float = Field(0.5, gt=0)
    max_iters: int = Field(50, ge=0)
    tol: float = Field(1e-6, gt=0)
    bootstrap: int = Field(100, ge=2)
    rivals: int = Field(20, ge=0)


class ConditionsSpec(_Strict):
    variant: Literal["base", "marginal", "variational", "adjoint", "combined"] = "base"
    sheet: Optional[dict[str, float]] = None


class OutputSpec(_Strict):
    dir: str = "out"


class Scenario(_Strict):
    seed: int = 0
    N: int = Field(ge=1)
    model: ModelSpec
    atlas: AtlasSpec = Field(default_factory=AtlasSpec)
    grid: GridSpec
    initial: InitialSpec = Field(default_factory=InitialSpec)
    control: ControlSpec = Field(default_factory=ControlSpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    conditions: ConditionsSpec = Field(default_factory=ConditionsSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)

    def canonical(self):
        """Sorted-key JSON of every semantic field (the output location is excluded)."""
        data = self.model_dump(mode="json", exclude={"output"})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _format_errors(err):
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_scenario(data):
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError(_format_errors(exc)) from None


def load_scenario(path):
    """Read and validate a TOML scenario; errors name the offending field or line/column."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"parse error: {exc}") from None
    return parse_scenario(data)


# ---------------------------------------------------------------------------
# builders


def build_atlas(sc):
    from .measures import build_type_atlas

    dist = sc.atlas.distribution.model_dump(exclude_none=True)
    return build_type_atlas({"mode": sc.atlas.mode, "count": sc.atlas.count, "distribution": dist}, seed=sc.atlas.seed)


def _kappa(spec):
    if isinstance(spec, KappaSpec):
        base, decay = spec.base, spec.decay
        return lambda u, v: base - decay * abs(float(u) - float(v))
    return float(spec)


def build_model(sc):
    from . import models

    fam = sc.model.family
    params = dict(sc.model.params)
    if "kappa" in params:
        params["kappa"] = _kappa(params["kappa"])
    for k, v in params.items():
        if isinstance(v, KappaSpec):
            raise ScenarioError(f"model.params.{k}: only kappa accepts a kernel table")
    try:
        if fam == "zero":
            if params:
                raise ScenarioError("model.params: the zero model takes no parameters")
            return models.zero_model(T=sc.grid.T)
        if fam == "lq_forward":
            if params:
                raise ScenarioError("model.params: lq_forward takes no parameters")
            return models.lq_forward(sc.grid.T)
        factory = models.BUILTIN[fam]
        return factory(T=sc.grid.T, **params)
    except TypeError as exc:
        raise ScenarioError(f"model.params: {exc}") from None


def build_initial(sc):
    from .models import InitialLaw

    return InitialLaw(**sc.initial.model_dump())


def build_grid(sc):
    from .solver import TimeGrid

    return TimeGrid(sc.grid.T, sc.grid.steps)


def build_control(sc, model, atlas):
    from .control import ControlField

    c = sc.control
    ctl = ControlField.zeros(c.kind, atlas.M, sc.grid.steps, model.dims.k, model.dims.n, features=c.features,
                             lower=c.lower, upper=c.upper)
    if c.kind == "open_loop":
        ctl.params[...] = c.initial_value
    else:
        ctl.params[..., 0] = c.initial_value
        ctl.params[..., 1 : 1 + model.dims.n] = c.initial_gain
    return ctl


def build_options(sc):
    from .solver import PicardOptions

    s = sc.solver
    return PicardOptions(s.max_outer, s.tol, s.inner, None, s.damping, s.basis, s.implicit_iters, "conditional", s.cap)
