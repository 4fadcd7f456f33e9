"""Experiment configuration: YAML schema, validation and model construction.

A parameter is either a constant (scalar, vector or matrix literal) or a
per-point table ``{table: <nested list or path to .npy>}`` with shape
``(size+1, size+1, a, b)``; a ``(size+1, size+1)`` table is read as a grid
of scalars. A vector literal is read as a row for ``C`` and as a diagonal
matrix everywhere else.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import ConfigDict, Field as PField, TypeAdapter, ValidationError, field_validator, model_validator
from pydantic.dataclasses import dataclass

from .energy import EnergySpec, HarvestDistribution
from .model import (
    ChannelSpec,
    Field,
    InitialConditions,
    ModelError,
    NonlinearitySpec,
    SystemModel,
    check_delay_order,
)

STRICT = ConfigDict(extra="forbid")

Literal2D = Union[float, list[float], list[list[float]]]


class ConfigError(ValueError):
    """Invalid configuration file; the message names the offending field."""


@dataclass(config=STRICT)
class TableRef:
    table: Union[str, list]


Param = Union[Literal2D, TableRef]


@dataclass(config=STRICT)
class NonlinearityConfig:
    directions: list[list[float]]
    shapes: list[list[float]]
    scale: float = 1.0


@dataclass(config=STRICT)
class InitialConfig:
    mean: Optional[list[float]] = None
    cov: Optional[Literal2D] = None


@dataclass(config=STRICT)
class HarvestConfig:
    probs: list[float]
    capacity: int
    level: int = 1
    rows: Optional[list[int]] = None
    cols: Optional[list[int]] = None


@dataclass(config=STRICT)
class ChannelConfig:
    C: Param
    R: Param
    harvest: HarvestConfig
    delay: tuple[int, int] = (0, 0)
    nonlinearity: Optional[NonlinearityConfig] = None


@dataclass(config=STRICT)
class ModelConfig:
    size: int
    A1: Param
    A2: Param
    B1: Param
    B2: Param
    Q: Param
    nonlinearity: Optional[NonlinearityConfig] = None
    initial: InitialConfig = PField(default_factory=InitialConfig)

    @field_validator("size")
    @classmethod
    def _size(cls, v):
        if v < 1:
            raise ValueError("size must be at least 1")
        return v


@dataclass(config=STRICT)
class FilterSection:
    mode: Literal["zero", "mc"] = "zero"
    mc_size: int = 2000
    mc_seed: int = 918273
    activation: Literal["bound", "empirical", "synthetic"] = "bound"
    synthetic_rho: float = 1.0
    empirical_runs: int = 20000
    jitter: float = 0.0


@dataclass(config=STRICT)
class SweepConfig:
    probes: list[tuple[int, int]]
    rho: list[float] = PField(default_factory=lambda: [round(0.1 * v, 1) for v in range(1, 11)])


@dataclass(config=STRICT)
class AnalysisConfig:
    energy: bool = True
    bounds: bool = False
    young: list[float] = PField(default_factory=lambda: [1.0])
    convention: Literal["consistent", "printed"] = "consistent"
    sweep: Optional[SweepConfig] = None
    validate_runs: int = 1000
    validate_covariance: bool = False


@dataclass(config=STRICT)
class ExperimentSpec:
    model: ModelConfig
    channels: list[ChannelConfig]
    horizon: Optional[tuple[int, int]] = None
    filter: FilterSection = PField(default_factory=FilterSection)
    analysis: AnalysisConfig = PField(default_factory=AnalysisConfig)
    seeds: list[int] = PField(default_factory=lambda: [0])
    output: str = "out"

    @field_validator("channels")
    @classmethod
    def _delays(cls, v):
        if not v:
            raise ValueError("at least one channel is required")
        try:
            check_delay_order([tuple(ch.delay) for ch in v])
        except ModelError as exc:
            raise ValueError(str(exc)) from None
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.horizon is not None:
            i, j = self.horizon
            if not (0 <= i <= self.model.size and 0 <= j <= self.model.size):
                raise ValueError(f"horizon: {self.horizon} outside the grid [0,{self.model.size}]^2")
        if not self.seeds:
            raise ValueError("seeds: must not be empty")
        i, j = self.horizon if self.horizon is not None else (self.model.size, self.model.size)
        sweep = self.analysis.sweep
        if sweep is not None:
            for p in sweep.probes:
                if not (1 <= p[0] <= i and 1 <= p[1] <= j):
                    raise ValueError(f"analysis.sweep.probes: {tuple(p)} must be an interior point with l <= {i}, k <= {j}")
            if any(not 0.0 < r <= 1.0 for r in sweep.rho):
                raise ValueError("analysis.sweep.rho: values must lie in (0, 1]")
        return self


_ADAPTER = TypeAdapter(ExperimentSpec)


def _yaml_line(root: yaml.Node | None, loc: tuple) -> int | None:
    """1-based line of the node addressed by a validation error location."""
    node = root
    line = None
    for key in loc:
        if node is None:
            break
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for knode, vnode in node.value:
                if knode.value == str(key):
                    line, nxt = knode.start_mark.line + 1, vnode
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def _format_errors(err: ValidationError, root) -> str:
    parts = []
    for e in err.errors():
        loc = tuple(p for p in e["loc"] if not (isinstance(p, str) and p[:1].isupper() and p.endswith("]")))
        # drop union branch labels such as 'TableRef' or 'list[float]'
        loc = tuple(p for p in loc if isinstance(p, int) or "[" not in str(p) and str(p) not in ("TableRef", "float"))
        name = ".".join(str(p) for p in loc) or "<root>"
        line = _yaml_line(root, loc)
        where = f" (line {line})" if line else ""
        msg = e["msg"].removeprefix("Value error, ")
        if e["type"] in ("extra_forbidden", "unexpected_keyword_argument"):
            msg = f"unknown key {str(loc[-1])!r}"
        parts.append(f"{name}{where}: {msg}")
    return "; ".join(dict.fromkeys(parts))


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentSpec:
    """Parse and validate YAML (or JSON) text."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse config{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        spec = _ADAPTER.validate_python(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, root)) from None
    if base_dir is not None:
        _resolve_tables(spec, Path(base_dir))
    try:
        build_model(spec)
    except ModelError as exc:
        raise ConfigError(f"model: {exc}") from None
    return spec


def load_config(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), base_dir=path.parent)


def _params(spec: ExperimentSpec):
    m = spec.model
    for name in ("A1", "A2", "B1", "B2", "Q"):
        yield m, name
    for ch in spec.channels:
        yield ch, "C"
        yield ch, "R"


def _resolve_tables(spec: ExperimentSpec, base: Path) -> None:
    for owner, name in _params(spec):
        val = getattr(owner, name)
        if isinstance(val, TableRef) and isinstance(val.table, str):
            p = Path(val.table)
            if not p.is_absolute():
                val.table = str((base / p).resolve())


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return _ADAPTER.dump_python(spec, mode="json")


def dump_config(spec: ExperimentSpec) -> str:
    """Config echo with every default filled in; loads back to an equal spec."""
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False, default_flow_style=None)


def config_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# construction


def _field(value: Param, name: str, size: int) -> Field:
    if isinstance(value, TableRef):
        tab = np.load(value.table) if isinstance(value.table, str) else np.asarray(value.table, dtype=float)
        tab = np.asarray(tab, dtype=float)
        if tab.ndim == 2:
            tab = tab[:, :, None, None]
        if tab.ndim != 4 or tab.shape[:2] != (size + 1, size + 1):
            raise ModelError(f"{name} table must have shape ({size + 1}, {size + 1}, a, b), got {tab.shape}")
        return Field(tab)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        # vectors are read as a single row for output maps, as a diagonal otherwise
        arr = arr.reshape(1, -1) if name.endswith("C") else np.diag(arr)
    return Field.constant(np.atleast_2d(arr), size)


def _nonlinearity(cfg: NonlinearityConfig | None, n_out: int, n_in: int, name: str) -> NonlinearitySpec:
    if cfg is None:
        return NonlinearitySpec.zero(n_out, n_in)
    spec = NonlinearitySpec(np.asarray(cfg.directions), np.asarray(cfg.shapes), cfg.scale)
    if (spec.n_out, spec.n_in) != (n_out, n_in):
        raise ModelError(f"{name} nonlinearity maps {spec.n_in}->{spec.n_out}, expected {n_in}->{n_out}")
    return spec


def build_model(spec: ExperimentSpec) -> SystemModel:
    m = spec.model
    size = m.size
    fields = {name: _field(getattr(m, name), name, size) for name in ("A1", "A2", "B1", "B2", "Q")}
    n = fields["A1"].shape[0]
    mean = np.zeros(n) if m.initial.mean is None else np.asarray(m.initial.mean, dtype=float)
    cov = np.eye(n) if m.initial.cov is None else np.atleast_2d(np.asarray(m.initial.cov, dtype=float))
    if mean.shape != (n,) or cov.shape != (n, n):
        raise ModelError(f"initial mean/cov must have shapes ({n},) and ({n},{n})")
    channels = []
    for idx, ch in enumerate(spec.channels):
        C = _field(ch.C, f"channels.{idx}.C", size)
        R = _field(ch.R, f"channels.{idx}.R", size)
        h = _nonlinearity(ch.nonlinearity, C.shape[0], n, f"channels.{idx}")
        channels.append(ChannelSpec(C=C, R=R, h=h, delay=tuple(ch.delay)))
    return SystemModel(
        g=_nonlinearity(m.nonlinearity, n, n, "model"),
        initial=InitialConditions.constant(mean, cov, size),
        channels=tuple(channels),
        size=size,
        **fields,
    )


def build_energy(spec: ExperimentSpec) -> list[EnergySpec]:
    size = spec.model.size
    out = []
    for idx, ch in enumerate(spec.channels):
        hv = ch.harvest
        rows = np.full(size + 1, hv.level) if hv.rows is None else np.asarray(hv.rows)
        cols = np.full(size + 1, hv.level) if hv.cols is None else np.asarray(hv.cols)
        if rows.shape != (size + 1,) or cols.shape != (size + 1,):
            raise ModelError(f"channels.{idx}.harvest boundary profiles need {size + 1} entries")
        out.append(EnergySpec(HarvestDistribution(np.asarray(hv.probs, dtype=float)), hv.capacity, rows, cols))
    return out
