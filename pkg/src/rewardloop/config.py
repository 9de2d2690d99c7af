"""Run configuration: a YAML document validated by pydantic; unknown keys are errors."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dsl import HomomorphismMap, RewardProgram, parse_program, validate_program
from .envs import (
    DEFAULT_MAP,
    DEPLOYMENT_SCHEMA,
    TRAINING_SCHEMA,
    EnvConfig,
    PhysicsParams,
    deployment_config,
    real_config,
    training_config,
)
from .eval_select import OBS_METRICS, CriterionWeights, SafetyRule
from .policy import PPOConfig, TeacherPolicy

DEFAULT_TASK = (
    "Write a reward program that makes the wheeled inverted pendulum track the commanded "
    "forward velocity and yaw rate while staying upright for the whole episode."
)
DEFAULT_ENV_DESC = (
    "A planar wheeled inverted pendulum driven by one motor torque in [-3, 3] N*m at 50 Hz. "
    "Episodes last 10 s and end early when |pitch| exceeds 0.6 rad. Physical parameters are "
    "randomised per episode. Policies are later deployed on a higher-fidelity simulator with "
    "actuation delay and sensor noise."
)


class ConfigError(Exception):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CriterionSection(_Strict):
    c_e: float = 1.0
    c_obs: dict[str, float] = Field(default_factory=dict)

    @field_validator("c_obs")
    @classmethod
    def _known(cls, v: dict[str, float]) -> dict[str, float]:
        unknown = sorted(set(v) - set(OBS_METRICS))
        if unknown:
            raise ValueError(f"unknown observation metrics {unknown}; known: {list(OBS_METRICS)}")
        return v


class PPOSection(_Strict):
    iters: int = Field(300, ge=0)
    n_envs: int = Field(16, ge=1)
    n_steps: int = Field(256, ge=1)
    minibatch: int = Field(256, ge=1)
    epochs: int = Field(4, ge=1)
    lr: float = Field(3e-4, gt=0)
    gamma: float = Field(0.99, gt=0, le=1)
    lam: float = Field(0.95, ge=0, le=1)
    epsilon: float = Field(0.2, gt=0)
    value_coef: float = Field(0.5, ge=0)
    max_grad_norm: float = Field(1.0, gt=0)
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    init_log_sigma: float = 0.0
    full_kl: bool = False
    eval_seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_commands: list[float] = Field(default_factory=lambda: [-0.5, 0.5, 1.0])

    def build(self) -> PPOConfig:
        d = self.model_dump()
        d.pop("iters")
        d["hidden"] = tuple(d["hidden"])
        d["eval_seeds"] = tuple(d["eval_seeds"])
        d["eval_commands"] = tuple(d["eval_commands"])
        return PPOConfig(**d)


class EnvSection(_Strict):
    """Overrides applied on top of a stage's built-in defaults; unset keys keep them."""

    integrator: Optional[Literal["euler", "rk4"]] = None
    control_dt: Optional[float] = Field(None, gt=0)
    physics_dt: Optional[float] = Field(None, gt=0)
    physics: dict[str, float] = Field(default_factory=dict)
    randomize: Optional[dict[str, float]] = None
    offsets: Optional[dict[str, float]] = None
    delay_steps: Optional[int] = Field(None, ge=0)
    obs_noise: Optional[dict[str, float]] = None
    theta_fall: Optional[float] = Field(None, gt=0)
    t_max: Optional[float] = Field(None, gt=0)
    u_max: Optional[float] = Field(None, gt=0)
    v_ref_range: Optional[tuple[float, float]] = None
    w_ref_range: Optional[tuple[float, float]] = None
    init_pitch: Optional[float] = None

    @field_validator("physics", "randomize", "offsets")
    @classmethod
    def _physics_names(cls, v):
        known = set(PhysicsParams().as_dict())
        unknown = sorted(set(v or {}) - known)
        if unknown:
            raise ValueError(f"unknown physical parameters {unknown}; known: {sorted(known)}")
        return v

    def apply(self, base: EnvConfig) -> EnvConfig:
        over = {
            k: v
            for k, v in self.model_dump(exclude={"physics", "physics_dt"}).items()
            if v is not None
        }
        nominal = base.nominal.as_dict()
        nominal.update(self.physics)
        if self.physics_dt is not None:
            nominal["dt"] = self.physics_dt
        return replace(base, nominal=PhysicsParams(**nominal), **over)


class EnvsSection(_Strict):
    training: EnvSection = Field(default_factory=EnvSection)
    gazebo_like: EnvSection = Field(default_factory=EnvSection)
    real_like: EnvSection = Field(default_factory=EnvSection)


class SafetyRuleSection(_Strict):
    name: str
    metric: str
    limit: float
    description: str = ""

    @field_validator("metric")
    @classmethod
    def _metric(cls, v: str) -> str:
        if v not in OBS_METRICS:
            raise ValueError(f"unknown safety metric {v!r}; known: {list(OBS_METRICS)}")
        return v


def _default_safety() -> list[SafetyRuleSection]:
    return [
        SafetyRuleSection(
            name="pitch_limit",
            metric="max_abs_pitch",
            limit=0.35,
            description="the body pitch must stay within 0.35 rad of upright",
        )
    ]


class BackendSection(_Strict):
    kind: Literal["mock", "http"] = "mock"
    fault_rate: float = Field(0.0, ge=0, le=1)
    repair_rate: float = Field(0.9, ge=0, le=1)
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(4, ge=0)
    max_concurrency: int = Field(4, ge=1)


class GenerationSection(_Strict):
    max_retries: int = Field(2, ge=0)
    temperature: float = Field(1.0, ge=0)
    token_budget: int = Field(8000, ge=1)
    workers: int = Field(1, ge=1)


class TeacherSection(_Strict):
    kind: Literal["none", "scripted_pd"] = "scripted_pd"
    gains: Optional[tuple[float, float, float]] = None

    def build(self) -> TeacherPolicy | None:
        if self.kind == "none":
            return None
        return TeacherPolicy() if self.gains is None else TeacherPolicy(gains=self.gains)


class FrameworkConfig(_Strict):
    iterations: int = Field(5, ge=1)
    candidates: int = Field(16, ge=1)
    c_bs: float = Field(0.15, gt=0, le=1)
    beta: float = Field(5.0, ge=0)
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    strict_alg1: bool = False
    exclude_unsafe: bool = False
    task: str = DEFAULT_TASK
    environment_description: str = DEFAULT_ENV_DESC
    reference_program: Optional[str] = None  # path, relative to the config file
    criterion: CriterionSection = Field(default_factory=CriterionSection)
    ppo: PPOSection = Field(default_factory=PPOSection)
    envs: EnvsSection = Field(default_factory=EnvsSection)
    homomorphism: Optional[dict[str, object]] = None  # None: the built-in name map
    safety: list[SafetyRuleSection] = Field(default_factory=_default_safety)
    backend: BackendSection = Field(default_factory=BackendSection)
    generation: GenerationSection = Field(default_factory=GenerationSection)
    teacher: TeacherSection = Field(default_factory=TeacherSection)

    @model_validator(mode="after")
    def _check_map(self) -> "FrameworkConfig":
        try:
            f = self.homomorphism_map()
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"homomorphism: malformed entry ({exc!r})") from exc
        problems = f.check_bijection(TRAINING_SCHEMA, DEPLOYMENT_SCHEMA)
        # unmapped training signals are allowed (terms using them get dropped); bad targets are not
        hard = [p for p in problems if not p.endswith("is not mapped")]
        if hard:
            raise ValueError("homomorphism: " + "; ".join(hard))
        return self

    # builders

    def homomorphism_map(self) -> HomomorphismMap:
        return DEFAULT_MAP if self.homomorphism is None else HomomorphismMap.from_dict(self.homomorphism)

    def weights(self) -> CriterionWeights:
        return CriterionWeights(self.criterion.c_e, dict(self.criterion.c_obs), self.c_bs)

    def safety_rules(self) -> list[SafetyRule]:
        return [SafetyRule(r.name, r.metric, r.limit, r.description) for r in self.safety]

    def training_env(self) -> EnvConfig:
        return self.envs.training.apply(training_config())

    def gazebo_env(self) -> EnvConfig:
        return replace(self.envs.gazebo_like.apply(deployment_config()), homomorphism=self.homomorphism_map())

    def real_env(self) -> EnvConfig:
        return replace(self.envs.real_like.apply(real_config()), homomorphism=self.homomorphism_map())

    def load_reference(self, base_dir: str | Path = ".") -> RewardProgram | None:
        if self.reference_program is None:
            return None
        path = Path(base_dir) / self.reference_program
        try:
            program = parse_program(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read reference program {path}: {exc}") from exc
        report = validate_program(program, TRAINING_SCHEMA)
        if not report.ok:
            raise ConfigError(f"reference program {path} does not validate:\n{report}")
        return program

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def load_config(path: str | Path) -> FrameworkConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def parse_config(text: str) -> FrameworkConfig:
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return FrameworkConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def save_config(cfg: FrameworkConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_yaml())
