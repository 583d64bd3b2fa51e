"""Experiment configuration: nested dataclasses, JSON loading, validation.

A config echoes back to a plain dict that is itself a valid config, so a
run directory's manifest is enough to rerun it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .adversary import AttackConfig
from .data import skew_fractions
from .federation import AggregationConfig
from .models import ModelSpec
from .smoothing import SmoothingConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class SmoothingSection:
    method: str = "ssa"
    gamma: float = 0.5  # only read by rsa
    Q: int = 1


@dataclass
class AttackSection:
    rho: float = 0.25
    p: str = "inf"
    steps: int = 10
    step_size: float | None = None
    init: str = "zero"


@dataclass
class DataSection:
    k: int = 4
    dim: int = 16
    per_class: int = 200
    test_per_class: int = 500
    separation: float = 6.0
    clip_norm: float | None = None
    m: int = 10
    a: float = 5.0
    csv: str | None = None
    test_csv: str | None = None


@dataclass
class ModelSection:
    # None picks the per-method default: one hidden layer of 32 for ssa and
    # rsa, a wider single layer of 64 for opsa
    hidden: list[int] | None = None
    activation: str = "tanh"


@dataclass
class TrainingSection:
    T: int = 30
    K: int = 3
    batch_size: int = 32
    schedule: str = "paper_fixed"
    eta0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 0


@dataclass
class AggregationSection:
    rule: str = "uniform"
    m_hat: int | None = None
    alpha_mode: str = "auto"
    alpha_fixed: float = 0.0
    penalty_lambda: float = 0.0


@dataclass
class TheorySection:
    C_x: float = 1.0
    C_y: float = 1.0
    C_0: float = 1.0
    C_W: float = 1.0
    width: int = 4


@dataclass
class ExperimentConfig:
    algo: str = "vfal"
    smoothing: SmoothingSection = field(default_factory=SmoothingSection)
    attack: AttackSection = field(default_factory=AttackSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    aggregation: AggregationSection = field(default_factory=AggregationSection)
    theory: TheorySection = field(default_factory=TheorySection)
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    out: str = "runs"

    # -------------------------------------------------------------- views

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def model_spec(self) -> ModelSpec:
        hidden = self.model.hidden
        if hidden is None:
            hidden = [64] if self.smoothing.method == "opsa" else [32]
        return ModelSpec("mlp", self.data.dim, hidden=tuple(hidden), n_classes=self.data.k,
                         activation=self.model.activation)

    def smoothing_config(self) -> SmoothingConfig:
        s, tr = self.smoothing, self.training
        return SmoothingConfig(method=s.method, gamma=s.gamma, Q=s.Q, schedule=tr.schedule, eta0=tr.eta0,
                               K=tr.K, batch_size=tr.batch_size, momentum=tr.momentum,
                               weight_decay=tr.weight_decay)

    def attack_config(self) -> AttackConfig:
        a = self.attack
        return AttackConfig(rho=a.rho, p=a.p, steps=a.steps, step_size=a.step_size, init=a.init)

    def aggregation_config(self) -> AggregationConfig:
        g = self.aggregation
        rule = g.rule
        if self.algo == "sfal":
            rule = "alpha_slack"
        return AggregationConfig(rule=rule, m_hat=g.m_hat, alpha_mode=g.alpha_mode,
                                 alpha_fixed=g.alpha_fixed, penalty_lambda=g.penalty_lambda)

    # -------------------------------------------------------------- checks

    def validate(self) -> "ExperimentConfig":
        """Run every precondition the modules would check, before any work."""
        if self.algo not in ("vfal", "sfal"):
            raise ConfigError(f"algo must be 'vfal' or 'sfal', got {self.algo!r}")
        if self.algo == "sfal" and self.aggregation.rule not in ("uniform", "alpha_slack"):
            raise ConfigError("sfal uses the alpha_slack rule; aggregation.rule conflicts")
        d = self.data
        if d.m < 1:
            raise ConfigError("data.m must be >= 1")
        if d.csv is None:
            if d.k < 2:
                raise ConfigError("data.k must be >= 2")
            if d.per_class < 1 or d.test_per_class < 1:
                raise ConfigError("data.per_class and data.test_per_class must be >= 1")
        if (d.m - 1) * d.a > 100 + 1e-9:
            raise ConfigError(f"(m-1)*a > 100: m={d.m}, a={d.a} leaves a negative own-shard share")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        if self.training.T < 0:
            raise ConfigError("training.T must be >= 0")
        if self.training.eval_every < 0:
            raise ConfigError("training.eval_every must be >= 0")
        m_hat = self.aggregation.m_hat
        if m_hat is not None and m_hat > d.m // 2:
            raise ConfigError(f"aggregation.m_hat={m_hat} violates m_hat <= m/2 (m={d.m})")
        try:
            skew_fractions(d.m, d.a)
            self.model_spec()
            self.smoothing_config()
            self.attack_config()
            agg = self.aggregation_config()
            if agg.rule == "alpha_slack":
                agg.resolved_m_hat(d.m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section.key`` (or top-level) values replaced."""
        raw = self.to_dict()
        for key, val in dotted.items():
            _set_dotted(raw, key, val)
        return from_dict(raw)


_SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def _set_dotted(raw: dict, key: str, val) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = val


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config; unknown keys are rejected by name."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, val in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        default = _SECTIONS[key].default_factory() if callable(_SECTIONS[key].default_factory) else None
        if is_dataclass(default):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            allowed = {f.name for f in fields(default)}
            for sub in val:
                if sub not in allowed:
                    raise ConfigError(f"unknown config key {key}.{sub!r}")
            kwargs[key] = replace(default, **val)
        else:
            kwargs[key] = val
    cfg = ExperimentConfig(**kwargs)
    try:
        cfg.seeds = [int(s) for s in cfg.seeds]
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load ``path`` (or the defaults) and apply dotted-key overrides on top."""
    cfg = load_config(path) if path is not None else ExperimentConfig().validate()
    if overrides:
        cfg = cfg.with_overrides(**{k: v for k, v in overrides.items() if v is not None})
    return cfg
