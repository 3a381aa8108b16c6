from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError


PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"

BARRIER_PRESETS = ("quadrotor_box", "unicycle_oriented_box", "quadratic_ball")

QUADROTOR_MASS = 0.027
GRAVITY = 9.81
NOMINAL_H_STAR = [1.0, GRAVITY, 1.0 / QUADROTOR_MASS]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ApfbsConfig(BaseModel):
    """Step size, window, l1 weight, hyperslab width, novelty threshold, dictionary cap."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lam: float = Field(0.1, gt=0.0, lt=2.0)
    s: int = Field(5, ge=1)
    mu: float = Field(0.01, ge=0.0)
    eps1: float = Field(0.2, ge=0.0)
    eps2: float = Field(0.1, ge=0.0)
    r_max: int = Field(600, ge=1)


class SwitchEntry(_Strict):
    step: int = Field(ge=0)
    h_star: List[float]


class RelocationEntry(_Strict):
    step: int = Field(ge=0)
    # None draws the position uniformly over the safe set with zero velocity
    state: Optional[List[float]] = None


class EnvConfig(_Strict):
    kind: Literal["quadrotor", "unicycle"] = "quadrotor"
    dt: Optional[float] = Field(None, gt=0.0)
    h_star: List[float] = Field(default_factory=lambda: list(NOMINAL_H_STAR))
    u_min: Optional[float] = None
    u_max: Optional[float] = Field(None, gt=0.0)
    initial_state: Optional[List[float]] = None
    switches: List[SwitchEntry] = Field(default_factory=list)
    relocations: List[RelocationEntry] = Field(default_factory=list)
    k_v: float = Field(0.5, gt=0.0)
    k_omega: float = Field(2.0, gt=0.0)

    @model_validator(mode="after")
    def _check_dims(self) -> "EnvConfig":
        if self.kind == "quadrotor":
            if len(self.h_star) != 3:
                raise ValueError("quadrotor h_star must have three entries")
            for sw in self.switches:
                if len(sw.h_star) != 3:
                    raise ValueError(f"switch at step {sw.step} must carry three parameters")
        n_x = 2 if self.kind == "quadrotor" else 3
        if self.initial_state is not None and len(self.initial_state) != n_x:
            raise ValueError(f"initial_state must have {n_x} entries for {self.kind}")
        for rel in self.relocations:
            if rel.state is not None and len(rel.state) != n_x:
                raise ValueError(f"relocation at step {rel.step} must have {n_x} entries")
        return self


class BarrierConfig(_Strict):
    preset: str = "quadrotor_box"
    eta: float = Field(0.01, gt=0.0, le=1.0)
    rho1: float = Field(0.0, ge=0.0)
    position_bound: float = Field(3.0, gt=0.0)
    x_max: float = Field(1.2, gt=0.0)
    y_max: float = Field(1.2, gt=0.0)
    upsilon: float = Field(0.1, gt=0.0)
    radius: float = Field(1.0, gt=0.0)
    # require a nonempty certified set at the model-predicted successor of explored inputs
    viability_check: bool = True
    lyapunov_c: float = Field(1.0, gt=0.0)

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v: str) -> str:
        if v not in BARRIER_PRESETS:
            raise ValueError(f"unknown barrier preset {v!r}; expected one of {', '.join(BARRIER_PRESETS)}")
        return v


class ModelLearnerConfig(_Strict):
    kind: Literal["parametric", "structured", "exact", "bayes_linear"] = "parametric"
    lam: float = Field(0.6, gt=0.0, lt=2.0)
    initial_parameters: Optional[List[float]] = None
    apfbs: ApfbsConfig = Field(default_factory=lambda: ApfbsConfig(lam=0.3, s=5, mu=1e-4, eps1=1e-3, eps2=0.1, r_max=500))
    apfbs_per_dim: Dict[int, ApfbsConfig] = Field(default_factory=dict)
    sigmas: List[float] = Field(default_factory=lambda: [50.0, 30.0, 10.0, 5.0, 2.0, 1.0])
    tau: float = Field(0.1, gt=0.0)
    state_indices: Optional[List[List[int]]] = None
    constant_dims: List[int] = Field(default_factory=list)
    prior_variance: float = Field(25.0, gt=0.0)
    noise_variance: float = Field(0.01, gt=0.0)

    @field_validator("sigmas")
    @classmethod
    def _positive_scales(cls, v: List[float]) -> List[float]:
        if not v or any(s <= 0 for s in v):
            raise ValueError("sigmas must be a nonempty list of positive scales")
        return v


class QLearnerConfig(_Strict):
    enabled: bool = True
    method: Literal["psi", "gp_sarsa", "gp_sarsa2"] = "psi"
    apfbs: ApfbsConfig = Field(default_factory=ApfbsConfig)
    sigmas: List[float] = Field(default_factory=lambda: [50.0, 30.0, 10.0, 5.0, 2.0, 1.0])

    @field_validator("sigmas")
    @classmethod
    def _positive_scales(cls, v: List[float]) -> List[float]:
        if not v or any(s <= 0 for s in v):
            raise ValueError("sigmas must be a nonempty list of positive scales")
        return v


class PolicyConfig(_Strict):
    update_period: int = Field(1000, ge=1)
    explore_steps: int = Field(10000, ge=0)
    gamma: float = Field(0.9, gt=0.0, lt=1.0)


class BaselineConfig(_Strict):
    bayes_linear: bool = False
    gp_sarsa: bool = False
    gp_sarsa2: bool = False
    gp_sarsa2_freeze: int = Field(600, ge=0)
    gp_sarsa_max_basis: int = Field(1500, ge=1)
    gp_sigma: float = Field(3.0, gt=0.0)
    gp_noise: float = Field(1e-6, gt=0.0)
    refresh_every: int = Field(100, ge=1)


class DeadlockConfig(_Strict):
    enabled: bool = False
    window: int = Field(10, ge=2)
    threshold: float = Field(1e-3, ge=0.0)


class EquivalenceConfig(_Strict):
    datasets: int = Field(50, ge=1)
    max_points: int = Field(30, ge=1)
    gammas: List[float] = Field(default_factory=lambda: [0.5, 0.9, 0.99])
    queries: int = Field(10, ge=1)
    noise: float = Field(1e-3, gt=0.0)
    sigma: float = Field(1.0, gt=0.0)


class ExperimentConfig(_Strict):
    name: str
    kind: Literal["recovery", "rl", "structure", "equivalence"]
    seed: int
    steps: int = Field(10000, ge=0)
    env: EnvConfig = Field(default_factory=EnvConfig)
    barrier: BarrierConfig = Field(default_factory=BarrierConfig)
    model: ModelLearnerConfig = Field(default_factory=ModelLearnerConfig)
    q: QLearnerConfig = Field(default_factory=QLearnerConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)
    deadlock: DeadlockConfig = Field(default_factory=DeadlockConfig)
    equivalence: EquivalenceConfig = Field(default_factory=EquivalenceConfig)
    replicas: int = Field(1, ge=1)
    evaluations: int = Field(5, ge=0)
    workers: int = Field(1, ge=1)
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.kind == "structure" and self.model.kind != "structured":
            raise ValueError("structure experiments need model.kind = structured")
        if self.kind == "recovery" and self.env.kind != "quadrotor":
            raise ValueError("recovery experiments run on the quadrotor")
        if self.barrier.preset == "quadrotor_box" and self.env.kind != "quadrotor":
            raise ValueError("quadrotor_box barriers need the quadrotor environment")
        if self.barrier.preset == "unicycle_oriented_box" and self.env.kind != "unicycle":
            raise ValueError("unicycle_oriented_box barriers need the unicycle environment")
        if self.model.kind in ("parametric", "bayes_linear") and self.env.kind != "quadrotor":
            raise ValueError(f"{self.model.kind} model learning is defined for the quadrotor basis only")
        return self

    def fingerprint(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _read_file(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return data


def resolve_config_path(name_or_path: Union[str, Path]) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    for candidate in (PRESET_DIR / f"{name_or_path}.yaml", PRESET_DIR / f"{str(name_or_path).replace('-', '_')}.yaml"):
        if candidate.exists():
            return candidate
    raise ConfigError(f"no config file or preset named {name_or_path!r}")


def build_config(data: dict, **overrides: object) -> ExperimentConfig:
    merged = dict(data)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(name_or_path: Union[str, Path], **overrides: object) -> ExperimentConfig:
    """
    Loads a YAML/JSON experiment config (or a bundled preset by name) and
    applies non-None overrides such as seed, output_dir, replicas.
    """
    return build_config(_read_file(resolve_config_path(name_or_path)), **overrides)
