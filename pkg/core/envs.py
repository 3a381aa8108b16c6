from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, ClassVar, List, Optional, Tuple, Union

import numpy as np

from core.config import GRAVITY, NOMINAL_H_STAR, QUADROTOR_MASS, EnvConfig
from core.errors import DimensionMismatchError


logger = logging.getLogger(__name__)

QUADROTOR_DT = 0.02
QUADROTOR_U_MAX = 2.0 * QUADROTOR_MASS * GRAVITY
UNICYCLE_DT = 0.3
UNICYCLE_U_MAX = 0.623


def wrap_angle(theta: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Maps angles to [-pi, pi)."""
    return (np.asarray(theta) + math.pi) % (2.0 * math.pi) - math.pi


def quadrotor_basis(z: np.ndarray, dt: float = QUADROTOR_DT) -> np.ndarray:
    """
    Xi(z) for z = [x; xdot; u]: columns A x, b and b u with
    A = [[1, dt], [0, 1]] and b = [-dt^2/2; -dt].
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != 3:
        raise DimensionMismatchError(f"quadrotor basis takes [x; xdot; u], got dimension {z.shape[0]}")
    x, v, u = z
    b = np.array([-0.5 * dt * dt, -dt])
    return np.column_stack([np.array([x + dt * v, v]), b, b * u])


@dataclass(frozen=True)
class ScheduleEvents:
    switched: bool = False
    relocated: bool = False


@dataclass
class QuadrotorEnv:
    """Vertical quadrotor, state [x; xdot], scalar input, x_next = Xi([x; u]) h*."""

    h_star: np.ndarray = field(default_factory=lambda: np.array(NOMINAL_H_STAR))
    dt: float = QUADROTOR_DT
    u_min: float = -QUADROTOR_U_MAX
    u_max: float = QUADROTOR_U_MAX
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))
    switches: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    relocations: List[Tuple[int, Optional[np.ndarray]]] = field(default_factory=list)
    position_bound: float = 3.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    events: ScheduleEvents = field(default_factory=ScheduleEvents)

    n_x = 2
    n_u = 1
    angle_dims: ClassVar[Tuple[int, ...]] = ()

    def __post_init__(self) -> None:
        self.h_star = np.asarray(self.h_star, dtype=np.float64)
        self.state = np.asarray(self.state, dtype=np.float64)
        if self.dt <= 0:
            raise ValueError("time step must be positive")
        if self.u_min >= self.u_max:
            raise ValueError("input box must be nonempty")

    @property
    def u_low(self) -> np.ndarray:
        return np.array([self.u_min])

    @property
    def u_high(self) -> np.ndarray:
        return np.array([self.u_max])

    def basis(self, z: np.ndarray) -> np.ndarray:
        return quadrotor_basis(z, self.dt)

    def true_affine(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        h1, h2, h3 = self.h_star
        b = np.array([-0.5 * self.dt * self.dt, -self.dt])
        A = np.array([[1.0, self.dt], [0.0, 1.0]])
        f = h1 * (A @ x) + h2 * b - x
        return f, (h3 * b).reshape(2, 1)

    def draw_state(self) -> np.ndarray:
        return np.array([self.rng.uniform(-self.position_bound, self.position_bound), 0.0])

    def step(self, u: Union[float, np.ndarray]) -> np.ndarray:
        self.state = quadrotor_step(self, self.state, u)
        return self.state


def quadrotor_step(env: QuadrotorEnv, x: np.ndarray, u: Union[float, np.ndarray]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != 2:
        raise DimensionMismatchError(f"quadrotor state is [x; xdot], got dimension {x.shape[0]}")
    u_c = float(np.clip(np.asarray(u, dtype=np.float64).ravel()[0], env.u_min, env.u_max))
    return env.basis(np.array([x[0], x[1], u_c])) @ env.h_star


@dataclass
class UnicycleEnv:
    """
    Forward-only differential drive, state [x; y; theta], wheel inputs [u1; u2]:
    d[x; y] = k_v (u1 + u2)/2 [cos; sin] dt, d theta = k_omega (u1 - u2) dt.
    """

    dt: float = UNICYCLE_DT
    k_v: float = 0.5
    k_omega: float = 2.0
    u_min: float = 0.0
    u_max: float = UNICYCLE_U_MAX
    state: np.ndarray = field(default_factory=lambda: np.zeros(3))
    relocations: List[Tuple[int, Optional[np.ndarray]]] = field(default_factory=list)
    x_max: float = 1.2
    y_max: float = 1.2
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    events: ScheduleEvents = field(default_factory=ScheduleEvents)

    n_x = 3
    n_u = 2
    angle_dims: ClassVar[Tuple[int, ...]] = (2,)

    def __post_init__(self) -> None:
        self.state = np.asarray(self.state, dtype=np.float64)
        if self.dt <= 0:
            raise ValueError("time step must be positive")
        if self.u_min >= self.u_max:
            raise ValueError("input box must be nonempty")

    @property
    def u_low(self) -> np.ndarray:
        return np.full(2, self.u_min)

    @property
    def u_high(self) -> np.ndarray:
        return np.full(2, self.u_max)

    @property
    def switches(self) -> List[Tuple[int, np.ndarray]]:
        return []

    def true_affine(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        theta = float(np.asarray(x, dtype=np.float64)[2])
        half = 0.5 * self.k_v * self.dt
        g = np.array(
            [
                [half * math.cos(theta), half * math.cos(theta)],
                [half * math.sin(theta), half * math.sin(theta)],
                [self.k_omega * self.dt, -self.k_omega * self.dt],
            ]
        )
        return np.zeros(3), g

    def draw_state(self) -> np.ndarray:
        return np.array(
            [
                self.rng.uniform(-self.x_max, self.x_max),
                self.rng.uniform(-self.y_max, self.y_max),
                self.rng.uniform(-math.pi, math.pi),
            ]
        )

    def step(self, u: np.ndarray) -> np.ndarray:
        self.state = unicycle_step(self, self.state, u)
        return self.state


def unicycle_step(env: UnicycleEnv, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    u = np.clip(np.asarray(u, dtype=np.float64).ravel(), env.u_min, env.u_max)
    if x.shape[0] != 3 or u.shape[0] != 2:
        raise DimensionMismatchError("unicycle takes a state [x; y; theta] and two wheel inputs")
    forward = env.k_v * 0.5 * (u[0] + u[1]) * env.dt
    turn = env.k_omega * (u[0] - u[1]) * env.dt
    return np.array(
        [
            x[0] + forward * math.cos(x[2]),
            x[1] + forward * math.sin(x[2]),
            float(wrap_angle(x[2] + turn)),
        ]
    )


Environment = Union[QuadrotorEnv, UnicycleEnv]


def apply_schedule(env: Environment, n: int) -> Environment:
    """Applies every switch and relocation registered for step n; env.events records what happened."""
    switched = False
    for step, h in env.switches:
        if step == n:
            env.h_star = np.asarray(h, dtype=np.float64)  # type: ignore[union-attr]
            switched = True
            logger.info("event=dynamics_switch step=%d h_star=%s", n, np.array2string(env.h_star, precision=6))  # type: ignore[union-attr]
    relocated = False
    for step, target in env.relocations:
        if step == n:
            env.state = env.draw_state() if target is None else np.asarray(target, dtype=np.float64)
            relocated = True
            logger.info("event=relocation step=%d state=%s", n, np.array2string(env.state, precision=6))
    env.events = ScheduleEvents(switched, relocated)
    return env


# --- rewards -----------------------------------------------------------------


@dataclass(frozen=True)
class RewardSpec:
    name: str
    fn: Callable[[np.ndarray, np.ndarray], float]
    r_max: float

    def __call__(self, x: np.ndarray, u: np.ndarray) -> float:
        return reward_eval(self, x, u)


def _quadrotor_reward(x: np.ndarray, u: np.ndarray) -> float:
    return -2.0 * x[0] ** 2 - 0.5 * x[1] ** 2 + 12.0


def _unicycle_reward(x: np.ndarray, u: np.ndarray) -> float:
    return -(x[0] ** 2 + x[1] ** 2) + 2.0


QUADROTOR_REWARD = RewardSpec("quadrotor", _quadrotor_reward, r_max=12.0)
UNICYCLE_REWARD = RewardSpec("unicycle", _unicycle_reward, r_max=2.0)


def reward_eval(spec: RewardSpec, x: np.ndarray, u: np.ndarray) -> float:
    return float(spec.fn(np.asarray(x, dtype=np.float64), np.atleast_1d(np.asarray(u, dtype=np.float64))))


def reward_for(env: Environment) -> RewardSpec:
    return QUADROTOR_REWARD if isinstance(env, QuadrotorEnv) else UNICYCLE_REWARD


def build_env(config: EnvConfig, rng: np.random.Generator, position_bound: float = 3.0, x_max: float = 1.2, y_max: float = 1.2) -> Environment:
    relocations = [(r.step, None if r.state is None else np.asarray(r.state, dtype=np.float64)) for r in config.relocations]
    if config.kind == "quadrotor":
        u_max = config.u_max if config.u_max is not None else QUADROTOR_U_MAX
        env: Environment = QuadrotorEnv(
            h_star=np.asarray(config.h_star, dtype=np.float64),
            dt=config.dt or QUADROTOR_DT,
            u_min=config.u_min if config.u_min is not None else -u_max,
            u_max=u_max,
            switches=[(s.step, np.asarray(s.h_star, dtype=np.float64)) for s in config.switches],
            relocations=relocations,
            position_bound=position_bound,
            rng=rng,
        )
    else:
        env = UnicycleEnv(
            dt=config.dt or UNICYCLE_DT,
            k_v=config.k_v,
            k_omega=config.k_omega,
            u_min=config.u_min if config.u_min is not None else 0.0,
            u_max=config.u_max if config.u_max is not None else UNICYCLE_U_MAX,
            relocations=relocations,
            x_max=x_max,
            y_max=y_max,
            rng=rng,
        )
    env.state = np.asarray(config.initial_state, dtype=np.float64) if config.initial_state is not None else env.draw_state()
    return env
