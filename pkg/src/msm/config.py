"""YAML experiment configuration."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
import yaml

from .errors import ConfigError, MSMError
from .topology import PhysicalParams, Topology, make_topology, normalize_scheme

MODULATIONS = ("msm", "ook", "qcsk", "pairwise")
BASELINES = ("qcsk", "pairwise")
SOURCES = ("closed-form", "fitted", "particle")
NOISES = ("binomial", "normal", "none")
BASES = ("per-slot", "per-bit")
RULES = ("optimize", "fraction", "fixed")


@dataclass(frozen=True)
class BudgetRule:
    rule: str = "fraction"
    fraction: float = 0.25
    L0: int | None = None
    L1: int | None = None
    targets: str | None = None
    span: float = 0.2


@dataclass(frozen=True)
class SystemConfig:
    name: str
    scheme: str
    modulation: str
    topology: dict
    budget: BudgetRule = BudgetRule()
    physics: dict = field(default_factory=dict)
    coefficients: str | None = None

    @property
    def is_baseline(self) -> bool:
        return self.modulation in BASELINES

    def make_topology(self) -> Topology:
        t = dict(self.topology)
        return make_topology(self.scheme, t.get("d1"), t.get("h"), t.get("w"), t.get("Rr", 2.0))


@dataclass(frozen=True)
class ChannelConfig:
    source: str = "closed-form"
    noise: str = "binomial"
    isi_memory: int = 1
    law_molecules: int = 200_000
    design: str | None = None       # model used to design detectors; defaults to the source
    isi_model: str = "mixture"      # "mixture" or "scalar"
    isi_variance: str = "kept"      # "kept" or "removed"


@dataclass(frozen=True)
class SweepConfig:
    basis: str = "per-slot"
    avg: tuple[float, ...] = ()
    L_total: int | None = None
    L0: tuple[int, ...] = ()

    @property
    def points(self) -> list[dict]:
        if self.L0:
            return [{"L_total": int(self.L_total), "L0": int(v)} for v in self.L0]
        return [{"avg": float(a)} for a in self.avg]


@dataclass(frozen=True)
class EngineConfig:
    """Particle-engine settings for the hitprob and fit commands."""

    molecules: int = 100_000
    slots: int = 10
    samples: int = 200
    far_field: bool = True
    rmse_ceiling: float = 1e-2


@dataclass(frozen=True)
class RankConfig:
    """Geometry sweep for the rank command."""

    parameter: str = "d1"
    values: tuple[float, ...] = ()
    draws: int = 1000
    molecules: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    systems: tuple[SystemConfig, ...]
    physics: dict
    sweep: SweepConfig
    channel: ChannelConfig = ChannelConfig()
    symbols: int = 10_000
    seed: int = 0
    out: str = "results"
    engine: EngineConfig = EngineConfig()
    rank: RankConfig = RankConfig()
    raw: dict = field(default_factory=dict, compare=False, repr=False)
    base_dir: str = "."

    def params_for(self, system: SystemConfig) -> PhysicalParams:
        p = {**self.physics, **system.physics}
        p.setdefault("seed", self.seed)
        try:
            return PhysicalParams(**p)
        except TypeError as exc:
            raise ConfigError(f"bad physics block: {exc}") from None

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for key, val in kw.items():
            if val is None:
                continue
            if key in ("source", "noise", "law_molecules", "design", "isi_model", "isi_variance"):
                raw.setdefault("channel", {})[key] = val
            else:
                raw[key] = val
        return from_dict(raw, self.base_dir)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _pick(d: dict, cls, where: str) -> dict:
    allowed = set(cls.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


def _one_of(value, options, what):
    if value not in options:
        raise ConfigError(f"{what} must be one of {options}, got {value!r}")
    return value


def _system(d: dict, k: int) -> SystemConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"systems[{k}] must be a mapping")
    d = dict(d)
    budget = BudgetRule(**_pick(dict(d.pop("budget", {}) or {}), BudgetRule, f"systems[{k}].budget"))
    _one_of(budget.rule, RULES, "budget.rule")
    if budget.rule == "fixed" and (budget.L0 is None or budget.L1 is None):
        raise ConfigError("budget rule 'fixed' needs L0 and L1")
    if not 0 < budget.fraction < 1:
        raise ConfigError("budget.fraction must lie in (0, 1)")
    _pick(d, SystemConfig, f"systems[{k}]")
    try:
        scheme = normalize_scheme(d["scheme"])
    except KeyError:
        raise ConfigError(f"systems[{k}] needs a scheme") from None
    except MSMError as exc:
        raise ConfigError(str(exc)) from None
    mod = _one_of(d.get("modulation", "msm" if scheme != "siso" else "ook"), MODULATIONS,
                  f"systems[{k}].modulation")
    if mod == "msm" and scheme == "siso":
        raise ConfigError("MSM needs at least two transmitters")
    if mod in ("ook", "qcsk") and scheme != "siso":
        raise ConfigError(f"{mod} runs on a single link (scheme siso)")
    if mod == "pairwise" and scheme not in ("2x2", "4x4"):
        raise ConfigError("pairwise baseline needs a 2x2 or 4x4 layout")
    if budget.rule == "optimize" and scheme != "2x1":
        raise ConfigError("budget rule 'optimize' is defined for 2x1 only")
    sys = SystemConfig(name=str(d.get("name", f"{mod}-{scheme}")), scheme=scheme, modulation=mod,
                       topology=dict(d.get("topology", {})), budget=budget,
                       physics=dict(d.get("physics", {}) or {}), coefficients=d.get("coefficients"))
    try:
        sys.make_topology()
    except (MSMError, TypeError) as exc:
        raise ConfigError(f"systems[{k}] topology: {exc}") from None
    return sys


def from_dict(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = copy.deepcopy(raw)
    _pick(raw, ExperimentConfig, "config")
    if {"raw", "base_dir"} & set(raw):
        raise ConfigError("unknown keys in config: 'raw' and 'base_dir' are reserved")
    systems = raw.get("systems")
    if not systems:
        raise ConfigError("config needs a non-empty 'systems' list")
    sweep_d = dict(raw.get("sweep", {}) or {})
    _pick(sweep_d, SweepConfig, "sweep")
    sweep = SweepConfig(basis=_one_of(sweep_d.get("basis", "per-slot"), BASES, "sweep.basis"),
                        avg=tuple(float(a) for a in sweep_d.get("avg", ())),
                        L_total=sweep_d.get("L_total"),
                        L0=tuple(int(v) for v in sweep_d.get("L0", ())))
    if sweep.L0 and sweep.L_total is None:
        raise ConfigError("an L0 sweep needs L_total")
    if sweep.L0 and not all(1 <= v < int(sweep.L_total) for v in sweep.L0):
        raise ConfigError("every swept L0 must lie in [1, L_total - 1]")
    if not sweep.points:
        raise ConfigError("sweep needs 'avg' values or 'L_total' with 'L0' values")
    if any(a <= 0 for a in sweep.avg):
        raise ConfigError("sweep.avg values must be positive")
    ch_d = dict(raw.get("channel", {}) or {})
    channel = ChannelConfig(**_pick(ch_d, ChannelConfig, "channel"))
    _one_of(channel.source, SOURCES, "channel.source")
    _one_of(channel.noise, NOISES, "channel.noise")
    if channel.design is not None:
        _one_of(channel.design, ("closed-form", "fitted"), "channel.design")
    _one_of(channel.isi_model, ("mixture", "scalar"), "channel.isi_model")
    _one_of(channel.isi_variance, ("kept", "removed"), "channel.isi_variance")
    if channel.isi_memory < 1:
        raise ConfigError("channel.isi_memory must be >= 1")
    engine = EngineConfig(**_pick(dict(raw.get("engine", {}) or {}), EngineConfig, "engine"))
    if engine.molecules < 1 or engine.slots < 1 or engine.samples < 10:
        raise ConfigError("engine needs molecules >= 1, slots >= 1 and samples >= 10")
    rank_d = dict(raw.get("rank", {}) or {})
    _pick(rank_d, RankConfig, "rank")
    rank = RankConfig(parameter=str(rank_d.get("parameter", "d1")),
                      values=tuple(float(v) for v in rank_d.get("values", ())),
                      draws=int(rank_d.get("draws", 1000)), molecules=int(rank_d.get("molecules", 100)))
    if rank.parameter not in ("d1", "h", "w", "Rr"):
        raise ConfigError("rank.parameter must be one of d1, h, w, Rr")
    symbols = int(raw.get("symbols", 10_000))
    if symbols < 100:
        raise ConfigError("symbols must be at least 100")
    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        systems=tuple(_system(s, k) for k, s in enumerate(systems)),
        physics=dict(raw.get("physics", {}) or {}),
        sweep=sweep, channel=channel, symbols=symbols, seed=int(raw.get("seed", 0)),
        out=str(raw.get("out", "results")), engine=engine, rank=rank, raw=raw, base_dir=str(base_dir))
    for s in cfg.systems:
        try:
            cfg.params_for(s)
        except MSMError as exc:
            raise ConfigError(f"{s.name}: {exc}") from None
        needs_fit = channel.source == "fitted" or channel.design == "fitted"
        if needs_fit:
            if not s.coefficients:
                raise ConfigError(f"{s.name}: fitted channel needs a coefficients file")
            if not cfg.resolve(s.coefficients).is_file():
                raise ConfigError(f"{s.name}: coefficients file {s.coefficients} not found")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    return from_dict(raw, path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)

