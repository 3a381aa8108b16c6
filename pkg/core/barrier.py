from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Deque, List, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
from scipy.optimize import minimize_scalar

from core.config import BarrierConfig
from core.envs import wrap_angle
from core.errors import DimensionMismatchError, InfeasibleSafeSetError
from core.structmodel import AffineExtract


logger = logging.getLogger(__name__)

# margins at or above -CERTIFY_TOL count as certified
CERTIFY_TOL = 1e-9
TIE_TOL = 1e-15
MAX_DRAWS = 10_000

StateFn = Callable[[np.ndarray], float]
GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class BarrierSpec:
    """
    A barrier B with its gradient and certificate parameters.

    nu bounds the Lipschitz constant of gradB, rho1 is the required margin and
    nu_B the Lipschitz constant of B itself (only the Lyapunov diagnostic uses it).
    """

    name: str
    B: StateFn
    gradB: GradFn
    eta: float = 0.01
    nu: float = 0.0
    rho1: float = 0.0
    nu_B: float = 1.0
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    orientation: Optional["OrientationBarrier"] = None

    def __post_init__(self) -> None:
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"barrier {self.name}: eta must lie in (0, 1]")
        if self.nu < 0 or self.rho1 < 0:
            raise ValueError(f"barrier {self.name}: nu and rho1 must be nonnegative")
        if self.nu_B <= 0:
            raise ValueError(f"barrier {self.name}: nu_B must be positive")

    def value(self, x: np.ndarray) -> float:
        return float(self.B(np.asarray(x, dtype=np.float64)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.gradB(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def affine_barrier(name: str, a: Sequence[float], c: float, **params: float) -> BarrierSpec:
    """B(x) = a.x + c."""
    a_vec = np.asarray(a, dtype=np.float64)
    return BarrierSpec(
        name,
        B=lambda x: float(a_vec @ x + c),
        gradB=lambda x: a_vec.copy(),
        hessian=lambda x: np.zeros((a_vec.shape[0], a_vec.shape[0])),
        **params,
    )


def ball_barrier(name: str, radius: float = 1.0, **params: float) -> BarrierSpec:
    """B(x) = radius^2 - |x|^2; gradB is 2-Lipschitz."""
    params.setdefault("nu", 2.0)
    return BarrierSpec(
        name,
        B=lambda x: float(radius**2 - x @ x),
        gradB=lambda x: -2.0 * x,
        hessian=lambda x: -2.0 * np.eye(x.shape[0]),
        **params,
    )


@dataclass(frozen=True, eq=False)
class OrientationBarrier:
    """
    B(x) = B~(x) - upsilon * Gamma(|wrap(theta - theta_t(x))|), where theta_t is
    the heading of the inward gradient of the base barrier B~ in the plane.
    """

    base: BarrierSpec
    upsilon: float = 0.1
    gamma: Callable[[float], float] = lambda d: d
    gamma_prime: Callable[[float], float] = lambda d: 1.0
    position_dims: Tuple[int, int] = (0, 1)
    angle_dim: int = 2

    def __post_init__(self) -> None:
        if self.upsilon <= 0:
            raise ValueError("orientation weight must be positive")

    def target_angle(self, x: np.ndarray) -> float:
        g = self.base.gradient(x)
        i, j = self.position_dims
        return math.atan2(g[j], g[i])

    def heading_error(self, x: np.ndarray) -> float:
        """wrap(theta - theta_t) in [-pi, pi)."""
        return float(wrap_angle(x[self.angle_dim] - self.target_angle(x)))

    def value(self, x: np.ndarray) -> float:
        return self.base.value(x) - self.upsilon * self.gamma(abs(self.heading_error(x)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        grad = self.base.gradient(x).copy()
        d = self.heading_error(x)
        slope = self.upsilon * self.gamma_prime(abs(d)) * float(np.sign(d))
        # d/dtheta of |wrap(theta - theta_t)|
        grad[self.angle_dim] -= slope
        if self.base.hessian is not None:
            i, j = self.position_dims
            g = self.base.gradient(x)
            H = self.base.hessian(x)
            norm2 = g[i] ** 2 + g[j] ** 2
            if norm2 > 0:
                dtheta_t = (g[i] * H[j] - g[j] * H[i]) / norm2
                grad += slope * dtheta_t
        return grad

    def spec(self, name: str, eta: float, nu: float = 0.0, rho1: float = 0.0) -> BarrierSpec:
        return BarrierSpec(name, B=self.value, gradB=self.gradient, eta=eta, nu=nu, rho1=rho1, orientation=self)


def barrier_preset(config: BarrierConfig) -> List[BarrierSpec]:
    """Named barrier sets: quadrotor_box, unicycle_oriented_box and quadratic_ball."""
    params = {"eta": config.eta, "rho1": config.rho1}
    if config.preset == "quadrotor_box":
        bound = config.position_bound
        return [
            affine_barrier("B_top", [-1.0, 0.0], bound, **params),
            affine_barrier("B_bottom", [1.0, 0.0], bound, **params),
        ]
    if config.preset == "unicycle_oriented_box":
        xm, ym = config.x_max, config.y_max
        bases = [
            affine_barrier("B1_base", [-1.0, 0.0, 0.0], xm, **params),
            affine_barrier("B2_base", [1.0, 0.0, 0.0], xm, **params),
            affine_barrier("B3_base", [0.0, -1.0, 0.0], ym, **params),
            affine_barrier("B4_base", [0.0, 1.0, 0.0], ym, **params),
        ]
        return [
            OrientationBarrier(b, upsilon=config.upsilon).spec(f"B{k}", config.eta, nu=0.0, rho1=config.rho1)
            for k, b in enumerate(bases, start=1)
        ]
    return [ball_barrier("B_ball", radius=config.radius, **params)]


def dcbf_residual(spec: BarrierSpec, x: np.ndarray, x_next: np.ndarray) -> float:
    """B(x_next) - B(x) + eta B(x); nonnegative iff the certificate holds for this transition."""
    b = spec.value(x)
    return spec.value(x_next) - b + spec.eta * b


# --- the certified safe input set ---------------------------------------------


@dataclass(frozen=True, eq=False)
class SafeInputProblem:
    """
    S^(x) = {u in [low, high] : margin_i(u) >= 0 for every barrier}, where
    margin_i(u) = gradB_i(x).d + eta B_i(x) - nu/2 |d|^2 - rho1 with d = f^ + g^ u.
    """

    x: np.ndarray
    f_hat: np.ndarray
    g_hat: np.ndarray
    barriers: Tuple[BarrierSpec, ...]
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64).ravel())
        object.__setattr__(self, "f_hat", np.asarray(self.f_hat, dtype=np.float64).ravel())
        object.__setattr__(self, "g_hat", np.atleast_2d(np.asarray(self.g_hat, dtype=np.float64)))
        object.__setattr__(self, "low", np.atleast_1d(np.asarray(self.low, dtype=np.float64)))
        object.__setattr__(self, "high", np.atleast_1d(np.asarray(self.high, dtype=np.float64)))
        object.__setattr__(self, "barriers", tuple(self.barriers))
        n_x = self.x.shape[0]
        if self.f_hat.shape[0] != n_x or self.g_hat.shape[0] != n_x:
            raise DimensionMismatchError(f"affine model has {self.f_hat.shape[0]} rows, state has {n_x}")
        if self.low.shape != self.high.shape or self.low.shape[0] != self.g_hat.shape[1]:
            raise DimensionMismatchError("input box and g_hat disagree on the input dimension")
        if np.any(self.low > self.high):
            raise ValueError("input box must be nonempty")

    @property
    def n_u(self) -> int:
        return int(self.low.shape[0])

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    @cached_property
    def coefficients(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Per barrier: const, linear (n_u) and the nu/2 weights so that
        margin(u) = const + linear.u - nu/2 (|f|^2 + 2 f.Gu + |Gu|^2).
        """
        grads = np.array([b.gradient(self.x) for b in self.barriers]).reshape(len(self.barriers), self.x.shape[0])
        values = np.array([b.value(self.x) for b in self.barriers])
        eta = np.array([b.eta for b in self.barriers])
        rho = np.array([b.rho1 for b in self.barriers])
        nu = np.array([b.nu for b in self.barriers])
        const = grads @ self.f_hat + eta * values - rho
        linear = grads @ self.g_hat
        return const, linear, nu


def build_problem(
    x: np.ndarray,
    affine: AffineExtract,
    barriers: Sequence[BarrierSpec],
    low: np.ndarray,
    high: np.ndarray,
) -> SafeInputProblem:
    return SafeInputProblem(x, affine.f_hat, affine.g_hat, tuple(barriers), low, high)


def margins_batch(problem: SafeInputProblem, U: np.ndarray) -> np.ndarray:
    """(N, n_barriers) certified margins for the rows of U."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if not problem.barriers:
        return np.zeros((U.shape[0], 0))
    const, linear, nu = problem.coefficients
    D = problem.f_hat[None, :] + U @ problem.g_hat.T
    sq = np.einsum("ij,ij->i", D, D)
    return const[None, :] + U @ linear.T - 0.5 * nu[None, :] * sq[:, None]


def certified_margin(problem: SafeInputProblem, spec: BarrierSpec, x: np.ndarray, u: np.ndarray) -> float:
    d = problem.f_hat + problem.g_hat @ np.atleast_1d(np.asarray(u, dtype=np.float64))
    return float(spec.gradient(x) @ d + spec.eta * spec.value(x) - 0.5 * spec.nu * (d @ d) - spec.rho1)


def min_margin(problem: SafeInputProblem, u: np.ndarray) -> float:
    m = margins_batch(problem, u)
    return float(m.min()) if m.size else math.inf


def is_certified(problem: SafeInputProblem, u: np.ndarray, tol: float = CERTIFY_TOL) -> bool:
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if np.any(u < problem.low - tol) or np.any(u > problem.high + tol):
        return False
    return min_margin(problem, u) >= -tol


@dataclass(frozen=True)
class SafeControlResult:
    """
    Outcome of a safe-control solve. On infeasibility u is None, witness is the
    box input with the largest minimum margin and violation is how far below
    zero that margin stays.
    """

    u: Optional[np.ndarray]
    feasible: bool
    objective: float = math.nan
    witness: Optional[np.ndarray] = None
    violation: float = 0.0
    status: str = "optimal"

    def require(self) -> np.ndarray:
        if self.u is None:
            raise InfeasibleSafeSetError(
                f"no certified input in the box (violation {self.violation:.3e})",
                witness=self.witness,
                violation=self.violation,
            )
        return self.u


# --- one input dimension: S^ is an interval in closed form -----------------------


def certified_interval(problem: SafeInputProblem) -> Optional[Tuple[float, float]]:
    """The certified set for n_u = 1 as [lo, hi], or None when it is empty."""
    lo, hi = float(problem.low[0]), float(problem.high[0])
    if not problem.barriers:
        return lo, hi
    const, linear, nu = problem.coefficients
    g = problem.g_hat[:, 0]
    f = problem.f_hat
    for k in range(len(problem.barriers)):
        c2 = -0.5 * nu[k] * float(g @ g)
        c1 = float(linear[k, 0]) - nu[k] * float(f @ g)
        c0 = float(const[k]) - 0.5 * nu[k] * float(f @ f)
        if c2 == 0.0:
            if c1 == 0.0:
                if c0 < 0.0:
                    return None
                continue
            root = -c0 / c1
            if c1 > 0:
                lo = max(lo, root)
            else:
                hi = min(hi, root)
        else:
            disc = c1 * c1 - 4.0 * c2 * c0
            if disc < 0.0:
                return None
            s = math.sqrt(disc)
            r1, r2 = sorted(((-c1 + s) / (2.0 * c2), (-c1 - s) / (2.0 * c2)))
            lo, hi = max(lo, r1), min(hi, r2)
        if lo > hi:
            return None
    return lo, hi


def _best_effort_1d(problem: SafeInputProblem) -> Tuple[np.ndarray, float]:
    res = minimize_scalar(
        lambda v: -min_margin(problem, np.array([v])),
        bounds=(float(problem.low[0]), float(problem.high[0])),
        method="bounded",
        options={"xatol": 1e-10},
    )
    u = np.array([float(res.x)])
    return u, min_margin(problem, u)


def _solve_1d(problem: SafeInputProblem, b: float) -> SafeControlResult:
    interval = certified_interval(problem)
    if interval is None:
        witness, best = _best_effort_1d(problem)
        return SafeControlResult(None, False, witness=witness, violation=max(-best, 0.0), status="infeasible")
    lo, hi = interval
    if abs(b) <= TIE_TOL:
        u = float(np.clip(problem.midpoint[0], lo, hi))
    else:
        u = hi if b > 0 else lo
    return SafeControlResult(np.array([u]), True, objective=b * u)


# --- general case through cvxpy ------------------------------------------------------


def _margin_exprs(problem: SafeInputProblem, u: cp.Variable) -> List[cp.Expression]:
    const, linear, nu = problem.coefficients
    exprs = []
    for k in range(len(problem.barriers)):
        expr = const[k] + linear[k] @ u
        if nu[k] > 0:
            expr = expr - 0.5 * nu[k] * cp.sum_squares(problem.f_hat + problem.g_hat @ u)
        exprs.append(expr)
    return exprs


def _solve(prob: cp.Problem) -> str:
    try:
        prob.solve()
    except cp.SolverError as exc:
        logger.warning("event=solver_error message=%s", exc)
        return "solver_error"
    return str(prob.status)


def _interior_point(problem: SafeInputProblem) -> Tuple[np.ndarray, float]:
    """Maximizes the smallest margin over the box; returns the maximizer and that margin."""
    if not problem.barriers:
        return problem.midpoint, math.inf
    u = cp.Variable(problem.n_u)
    t = cp.Variable()
    cons = [u >= problem.low, u <= problem.high] + [m >= t for m in _margin_exprs(problem, u)]
    prob = cp.Problem(cp.Maximize(t), cons)
    status = _solve(prob)
    if u.value is None or status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return problem.midpoint, min_margin(problem, problem.midpoint)
    point = np.clip(np.asarray(u.value, dtype=np.float64), problem.low, problem.high)
    return point, min_margin(problem, point)


def _bisect_toward(problem: SafeInputProblem, inside: np.ndarray, target: np.ndarray, steps: int = 60) -> np.ndarray:
    """Furthest certified point on the segment from a certified point toward target."""
    if is_certified(problem, target, tol=0.0):
        return target
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if is_certified(problem, inside + mid * (target - inside), tol=0.0):
            lo = mid
        else:
            hi = mid
    return inside + lo * (target - inside)


def _solve_nd(problem: SafeInputProblem, b: np.ndarray) -> SafeControlResult:
    interior, best = _interior_point(problem)
    if best < -CERTIFY_TOL:
        return SafeControlResult(None, False, witness=interior, violation=-best, status="infeasible")
    if float(np.linalg.norm(b)) <= TIE_TOL:
        u = _bisect_toward(problem, interior, problem.midpoint)
        return SafeControlResult(u, True, objective=0.0, status="tie")
    u_var = cp.Variable(problem.n_u)
    cons = [u_var >= problem.low, u_var <= problem.high] + [m >= 0 for m in _margin_exprs(problem, u_var)]
    prob = cp.Problem(cp.Maximize(b @ u_var), cons)
    status = _solve(prob)
    if u_var.value is None:
        return SafeControlResult(interior, True, objective=float(b @ interior), status=f"fallback_{status}")
    u = np.clip(np.asarray(u_var.value, dtype=np.float64), problem.low, problem.high)
    if not is_certified(problem, u, tol=0.0):
        u = _bisect_toward(problem, interior, u)
    return SafeControlResult(u, True, objective=float(b @ u), status=str(status))


def solve_safe_control(problem: SafeInputProblem, objective: Tuple[float, np.ndarray]) -> SafeControlResult:
    """
    Maximizes a + b.u over the certified set. The constant a does not move the
    maximizer; it is added back into the reported objective.
    """
    a, b = objective
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if b.shape[0] != problem.n_u:
        raise DimensionMismatchError(f"objective has {b.shape[0]} input coefficients, expected {problem.n_u}")
    if problem.n_u == 1:
        result = _solve_1d(problem, float(b[0]))
    else:
        result = _solve_nd(problem, b)
    if not result.feasible:
        logger.debug("event=infeasible_safe_set violation=%.3e", result.violation)
        return result
    return SafeControlResult(result.u, True, objective=float(a) + result.objective, status=result.status)


def is_feasible(problem: SafeInputProblem) -> bool:
    if problem.n_u == 1:
        return certified_interval(problem) is not None
    return _interior_point(problem)[1] >= -CERTIFY_TOL


SuccessorCheck = Callable[[np.ndarray], bool]


def successor_check(problem: SafeInputProblem, problem_at: Callable[[np.ndarray], SafeInputProblem]) -> Optional[SuccessorCheck]:
    """
    Accepts u when the certified set at the model-predicted successor
    x + f^ + g^ u is nonempty. None when there is nothing to certify.
    """
    if not problem.barriers:
        return None

    def ok(u: np.ndarray) -> bool:
        x_hat = problem.x + problem.f_hat + problem.g_hat @ np.atleast_1d(np.asarray(u, dtype=np.float64))
        return is_feasible(problem_at(x_hat))

    return ok


def _viable_candidates(problem: SafeInputProblem, b: np.ndarray, best: np.ndarray, grid: int) -> np.ndarray:
    if problem.n_u == 1:
        interval = certified_interval(problem)
        if interval is None:
            return np.zeros((0, 1))
        U = np.linspace(interval[0], interval[1], grid)[:, None]
    else:
        interior, margin = _interior_point(problem)
        if margin < -CERTIFY_TOL:
            return np.zeros((0, problem.n_u))
        t = np.linspace(1.0, 0.0, grid)[:, None]
        U = interior[None, :] + t * (best - interior)[None, :]
    order = np.argsort(-(U @ b), kind="stable")
    return U[order]


def viable_safe_control(
    problem: SafeInputProblem,
    objective: Tuple[float, np.ndarray],
    successor_ok: Optional[SuccessorCheck],
    grid: int = 33,
) -> SafeControlResult:
    """
    solve_safe_control restricted to inputs that successor_ok accepts. The
    certified set is scanned on a grid in decreasing objective order; when no
    grid point is accepted the unrestricted maximizer is returned with status
    "not_viable".
    """
    result = solve_safe_control(problem, objective)
    if result.u is None or successor_ok is None or successor_ok(result.u):
        return result
    a, b = objective
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    for u in _viable_candidates(problem, b, result.u, grid):
        if is_certified(problem, u) and successor_ok(u):
            return SafeControlResult(u.copy(), True, objective=float(a) + float(b @ u), status="viable")
    logger.debug("event=no_viable_input x=%s", np.array2string(problem.x, precision=4))
    return SafeControlResult(result.u, True, objective=result.objective, status="not_viable")


def sample_safe_input(
    problem: SafeInputProblem,
    rng: Union[int, np.random.Generator, None] = None,
    successor_ok: Optional[Callable[[np.ndarray], bool]] = None,
    max_draws: int = MAX_DRAWS,
    batch: int = 256,
    max_successor_checks: int = 32,
) -> np.ndarray:
    """
    Uniform rejection sampling from the box until every margin is nonnegative.

    successor_ok, when given, must also accept the draw. After max_draws the
    extreme points of the certified set are tried instead; the returned input
    is always certified.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    drawn = 0
    checks = 0
    while drawn < max_draws and checks < max_successor_checks:
        n = min(batch, max_draws - drawn)
        U = gen.uniform(problem.low, problem.high, size=(n, problem.n_u))
        drawn += n
        M = margins_batch(problem, U)
        ok = np.all(M >= 0.0, axis=1) if M.size else np.ones(n, dtype=bool)
        for idx in np.flatnonzero(ok):
            u = U[idx]
            if successor_ok is None:
                return u
            checks += 1
            if successor_ok(u):
                return u
            if checks >= max_successor_checks:
                break
    logger.debug("event=sampling_fallback draws=%d successor_checks=%d", drawn, checks)
    return _fallback_input(problem, gen, successor_ok)


def _fallback_input(
    problem: SafeInputProblem,
    gen: np.random.Generator,
    successor_ok: Optional[Callable[[np.ndarray], bool]],
) -> np.ndarray:
    objectives = [gen.standard_normal(problem.n_u)]
    for i in range(problem.n_u):
        e = np.zeros(problem.n_u)
        e[i] = 1.0
        objectives.extend([e, -e])
    objectives.append(np.zeros(problem.n_u))
    first: Optional[np.ndarray] = None
    last = None
    for b in objectives:
        result = solve_safe_control(problem, (0.0, b))
        last = result
        if result.u is None:
            break
        if first is None:
            first = result.u
        if successor_ok is None or successor_ok(result.u):
            return result.u
    if first is not None:
        return first
    assert last is not None
    return last.require()


def lyapunov_value(
    x: np.ndarray,
    h: Optional[np.ndarray],
    omega_oracle: Optional[Callable[[np.ndarray], float]],
    c: float,
    barriers: Sequence[BarrierSpec],
) -> float:
    """V = -min(min_i B_i(x), 0) + c dist(h, Omega); zero exactly on C x Omega."""
    if c <= 0:
        raise ValueError("Lyapunov weight must be positive")
    b_min = min((b.value(x) for b in barriers), default=0.0)
    dist = 0.0 if h is None or omega_oracle is None else float(omega_oracle(h))
    return -min(b_min, 0.0) + c * dist


# --- deadlock handling ------------------------------------------------------------------


@dataclass
class DeadlockMonitor:
    """Fires when the planar displacement over the last `window` states stays below threshold."""

    window: int = 10
    threshold: float = 1e-3
    position_dims: Tuple[int, ...] = (0, 1)
    history: Deque[np.ndarray] = field(default_factory=deque)

    def __post_init__(self) -> None:
        self.history = deque(self.history, maxlen=self.window)

    def observe(self, x: np.ndarray) -> bool:
        self.history.append(np.asarray(x, dtype=np.float64)[list(self.position_dims)].copy())
        if len(self.history) < self.window:
            return False
        if float(np.linalg.norm(self.history[-1] - self.history[0])) < self.threshold:
            self.history.clear()
            return True
        return False


def turn_inward_override(x: np.ndarray, barriers: Sequence[BarrierSpec], low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """
    Differential-drive override: full power on the wheel that rotates the heading
    toward the inward gradient of the closest base barrier. The result is not
    certified and is flagged by the caller.
    """
    oriented = [b.orientation for b in barriers if b.orientation is not None]
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if not oriented or low.shape[0] != 2:
        return 0.5 * (low + high)
    closest = min(oriented, key=lambda o: o.base.value(x))
    turn_left = -closest.heading_error(x) > 0
    logger.info("event=deadlock_override barrier=%s heading_error=%.4f", closest.base.name, closest.heading_error(x))
    if turn_left:
        return np.array([high[0], low[1]])
    return np.array([low[0], high[1]])
