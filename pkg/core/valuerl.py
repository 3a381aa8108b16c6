from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np

from core.adafilter import (
    FilterState,
    TransitionWindow,
    admit_or_skip,
    apfbs_update,
    empty_state,
    predict,
    prune_zero_atoms,
)
from core.barrier import (
    CERTIFY_TOL,
    BarrierSpec,
    DeadlockMonitor,
    SafeControlResult,
    SafeInputProblem,
    SuccessorCheck,
    build_problem,
    lyapunov_value,
    margins_batch,
    sample_safe_input,
    solve_safe_control,
    successor_check,
    turn_inward_override,
    viable_safe_control,
)
from core.config import ApfbsConfig, PolicyConfig
from core.envs import Environment, RewardSpec, apply_schedule, reward_eval
from core.errors import DimensionMismatchError, InfeasibleSafeSetError
from core.kernels import Gaussian, KernelSpec, Paired, Tensor, control_kernel
from core.structmodel import DynamicsLearner


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QKernelSpec:
    """
    kappa^Q = kappa^x (x) kappa^u over z = [x; u] with kappa^u(u, v) = 1 + u.v/4,
    one Gaussian kappa^x per scale, and the paired kernels over [z; w].
    """

    n_x: int
    n_u: int
    sigmas: Tuple[float, ...] = (1.0,)
    gamma: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount factor must lie in (0, 1)")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))

    @property
    def z_dim(self) -> int:
        return self.n_x + self.n_u

    @property
    def q_kernels(self) -> List[KernelSpec]:
        return [Tensor(Gaussian(s, self.n_x), control_kernel(), split=self.n_x) for s in self.sigmas]

    @property
    def paired_kernels(self) -> List[Paired]:
        return [Paired(k, self.gamma, split=self.z_dim) for k in self.q_kernels]


def paired_kernel_eval(spec: QKernelSpec, zw: np.ndarray, zw_tilde: np.ndarray, m: int = 0) -> float:
    """(k(z, z~) - g k(z, w~)) - g (k(w, z~) - g k(w, w~)) for the m-th scale."""
    a = np.atleast_2d(np.asarray(zw, dtype=np.float64))
    b = np.atleast_2d(np.asarray(zw_tilde, dtype=np.float64))
    return float(spec.paired_kernels[m].cross(a, b)[0, 0])


@dataclass(eq=False)
class QModel:
    """
    psi^Q estimator over paired inputs [z; w]. The same coefficients give
    Q^(z) = sum_j h_j (k^Q(z, z~_j) - gamma k^Q(z, w~_j)).
    """

    spec: QKernelSpec
    state: FilterState
    window: TransitionWindow

    @property
    def size(self) -> int:
        return self.state.dictionary.size


def empty_qmodel(spec: QKernelSpec, r_max: int = 600, window: int = 5) -> QModel:
    state = empty_state(spec.paired_kernels, 2 * spec.z_dim, r_max)
    return QModel(spec, state, TransitionWindow(window))


def _pair(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(z, dtype=np.float64).ravel(), np.asarray(w, dtype=np.float64).ravel()])


def q_features(model: QModel, Z: Any) -> np.ndarray:
    """Rows of k^Q(z) for the rows of Z, aligned with the dictionary atoms."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != model.spec.z_dim:
        raise DimensionMismatchError(f"Q input has dimension {Z.shape[1]}, expected {model.spec.z_dim}")
    d = model.state.dictionary
    out = np.zeros((Z.shape[0], d.size))
    for m, kernel in enumerate(d.kernels):
        idx = np.flatnonzero(d.kernel_ids == m)
        if idx.size:
            out[:, idx] = kernel.unpaired(Z, d.centers[idx])  # type: ignore[attr-defined]
    return out


def q_predict(model: QModel, z: np.ndarray) -> float:
    if model.size == 0:
        q_features(model, z)
        return 0.0
    return float(q_features(model, z)[0] @ model.state.h)


def psi_predict(model: QModel, z: np.ndarray, w: np.ndarray) -> float:
    return predict(model.state, _pair(z, w))


def q_update(
    model: QModel,
    z_n: np.ndarray,
    z_next_policy: np.ndarray,
    reward: float,
    config: ApfbsConfig,
    prune: bool = True,
) -> QModel:
    """One admit-then-APFBS step on the pair [z_n; z_next] with target R_n."""
    zw = _pair(z_n, z_next_policy)
    window = model.window
    if window.s != config.s:
        window = TransitionWindow(config.s, window.pairs)
    window.push(zw, reward)
    state = admit_or_skip(model.state, zw, reward, config)
    state = apfbs_update(state, window, config)
    if prune and config.mu > 0:
        state = prune_zero_atoms(state)
    return replace(model, state=state, window=window)


def rkhs_norms(model_a: QModel, model_b: QModel) -> Tuple[float, float]:
    """
    (|psi_A - psi_B| in the paired space, |Q_A - Q_B| in H_Q), each summed over
    the per-scale component spaces. The second is computed from kappa^Q alone on
    the expanded atoms {z~_j} and {w~_j}.
    """
    if model_a.spec != model_b.spec:
        raise ValueError("rkhs_norms needs models with the same kernel spec")
    spec = model_a.spec
    da, db = model_a.state.dictionary, model_b.state.dictionary
    psi_sq = 0.0
    q_sq = 0.0
    s = spec.z_dim
    for m, (paired, kq) in enumerate(zip(spec.paired_kernels, spec.q_kernels)):
        ia = np.flatnonzero(da.kernel_ids == m)
        ib = np.flatnonzero(db.kernel_ids == m)
        C = np.vstack([da.centers[ia], db.centers[ib]])
        c = np.concatenate([model_a.state.h[ia], -model_b.state.h[ib]])
        if c.size == 0:
            continue
        psi_sq += float(c @ paired.cross(C, C) @ c)
        points = np.vstack([C[:, :s], C[:, s:]])
        coef = np.concatenate([c, -spec.gamma * c])
        q_sq += float(coef @ kq.cross(points, points) @ coef)
    return math.sqrt(max(psi_sq, 0.0)), math.sqrt(max(q_sq, 0.0))


# --- value learners behind one interface --------------------------------------------


class ValueLearner(Protocol):
    gamma: float

    def psi(self, z: np.ndarray, w: np.ndarray) -> float: ...

    def q(self, z: np.ndarray) -> float: ...

    def update(self, z: np.ndarray, w: np.ndarray, reward: float) -> None: ...

    def snapshot(self) -> Callable[[np.ndarray], float]: ...


class PsiQLearner:
    def __init__(self, model: QModel, config: ApfbsConfig):
        self.model = model
        self.config = config
        self.gamma = model.spec.gamma

    def psi(self, z: np.ndarray, w: np.ndarray) -> float:
        return psi_predict(self.model, z, w)

    def q(self, z: np.ndarray) -> float:
        return q_predict(self.model, z)

    def update(self, z: np.ndarray, w: np.ndarray, reward: float) -> None:
        self.model = q_update(self.model, z, w, reward, self.config)

    def snapshot(self) -> Callable[[np.ndarray], float]:
        frozen = QModel(self.model.spec, self.model.state, TransitionWindow(1))
        return lambda z: q_predict(frozen, z)


# --- parametric action values --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParametricQ:
    """Q(z) = h.zeta(z) for a fixed feature map zeta."""

    features: Callable[[np.ndarray], np.ndarray]
    h: np.ndarray
    lam: float = 0.5
    gamma: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 < self.lam < 2.0:
            raise ValueError("step size must lie in (0, 2)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount factor must lie in (0, 1)")


def parametric_q_predict(model: ParametricQ, z: np.ndarray) -> float:
    return float(model.h @ model.features(np.asarray(z, dtype=np.float64)))


def parametric_q_update(model: ParametricQ, z: np.ndarray, z_next: np.ndarray, reward: float) -> ParametricQ:
    """Relaxed projection onto {h : h.(zeta(z) - gamma zeta(z_next)) = R}."""
    diff = model.features(np.asarray(z, dtype=np.float64)) - model.gamma * model.features(np.asarray(z_next, dtype=np.float64))
    nd = float(diff @ diff)
    if nd == 0.0:
        return model
    err = float(model.h @ diff) - reward
    return replace(model, h=model.h - model.lam * (err / nd) * diff)


# --- greedy, barrier-certified policies -------------------------------------------------


def q_split(q_fn: Callable[[np.ndarray], float], x: np.ndarray, n_u: int) -> Tuple[float, np.ndarray]:
    """Q(x, u) = a + b.u; exact for kernels that are affine in u."""
    x = np.asarray(x, dtype=np.float64).ravel()
    a = q_fn(np.concatenate([x, np.zeros(n_u)]))
    b = np.zeros(n_u)
    for i in range(n_u):
        e = np.zeros(n_u)
        e[i] = 1.0
        b[i] = q_fn(np.concatenate([x, e])) - a
    return a, b


ProblemFn = Callable[[np.ndarray], SafeInputProblem]
ViabilityFn = Callable[[SafeInputProblem], Optional[SuccessorCheck]]


@dataclass
class GreedyPolicy:
    """
    phi(x) = argmax of Q(x, u) over the certified set. With a viability function
    the maximizer is also required to keep the predicted successor certifiable.
    """

    q_fn: Callable[[np.ndarray], float]
    n_u: int
    problem_fn: ProblemFn
    version: int = 0
    viability: Optional[ViabilityFn] = None

    def act(self, x: np.ndarray, problem: Optional[SafeInputProblem] = None) -> SafeControlResult:
        problem = problem if problem is not None else self.problem_fn(x)
        objective = q_split(self.q_fn, x, self.n_u)
        if self.viability is None:
            return solve_safe_control(problem, objective)
        return viable_safe_control(problem, objective, self.viability(problem))


def improve_policy(model: QModel, problem_fn: ProblemFn, version: int = 0, viability: Optional[ViabilityFn] = None) -> GreedyPolicy:
    frozen = QModel(model.spec, model.state, TransitionWindow(1))
    return GreedyPolicy(lambda z: q_predict(frozen, z), model.spec.n_u, problem_fn, version, viability)


# --- the learning loop -------------------------------------------------------------


@dataclass
class LearnerBundle:
    """Everything one run of the loop owns; a single writer advances it step by step."""

    env: Environment
    learner: DynamicsLearner
    barriers: List[BarrierSpec]
    reward: RewardSpec
    policy_config: PolicyConfig
    rng: np.random.Generator
    value: Optional[ValueLearner] = None
    policy: Optional[GreedyPolicy] = None
    shadows: Dict[str, ValueLearner] = field(default_factory=dict)
    monitor: Optional[DeadlockMonitor] = None
    viability: bool = True
    lyapunov_c: float = 1.0
    n: int = 0
    x: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    problem: Optional[SafeInputProblem] = None
    override: bool = False
    # the policy in force once step explore_steps has run
    explore_end_policy: Optional[GreedyPolicy] = None

    @property
    def low(self) -> np.ndarray:
        return self.env.u_low

    @property
    def high(self) -> np.ndarray:
        return self.env.u_high

    def problem_at(self, x: np.ndarray) -> SafeInputProblem:
        return build_problem(x, self.learner.affine(x), self.barriers, self.low, self.high)

    def policy_fn(self) -> ProblemFn:
        return self.problem_at

    def successor_check(self, problem: SafeInputProblem) -> Optional[SuccessorCheck]:
        if not self.viability:
            return None
        return successor_check(problem, self.problem_at)

    def viability_fn(self) -> Optional[ViabilityFn]:
        return self.successor_check if self.viability else None

    def new_policy(self, version: int) -> GreedyPolicy:
        assert self.value is not None
        return GreedyPolicy(self.value.snapshot(), len(self.low), self.policy_fn(), version, self.viability_fn())


def _override_input(bundle: LearnerBundle, x: np.ndarray, problem: SafeInputProblem, witness: Optional[np.ndarray], violation: float) -> np.ndarray:
    """Empty certified set: the turn-inward override, or the max-min-margin input without orientation barriers."""
    logger.warning("event=infeasible_safe_set step=%d violation=%.3e", bundle.n, violation)
    if any(b.orientation is not None for b in bundle.barriers) and problem.n_u == 2:
        return turn_inward_override(x, bundle.barriers, problem.low, problem.high)
    logger.info("event=deadlock_override step=%d input=witness", bundle.n)
    base = witness if witness is not None else problem.midpoint
    return np.clip(base, problem.low, problem.high)


def _explore(bundle: LearnerBundle, x: np.ndarray, problem: SafeInputProblem) -> Tuple[np.ndarray, bool]:
    try:
        return sample_safe_input(problem, bundle.rng, bundle.successor_check(problem)), False
    except InfeasibleSafeSetError as exc:
        return _override_input(bundle, x, problem, exc.witness, exc.violation), True


def _from_result(bundle: LearnerBundle, result: SafeControlResult, x: np.ndarray, problem: SafeInputProblem) -> Tuple[np.ndarray, bool]:
    if result.u is not None:
        return result.u, False
    return _override_input(bundle, x, problem, result.witness, result.violation), True


def _choose_input(
    bundle: LearnerBundle,
    x: np.ndarray,
    problem: SafeInputProblem,
    step: int,
    phi: Optional[SafeControlResult],
) -> Tuple[np.ndarray, bool]:
    """The input for `step` and whether it came from the override path."""
    exploring = bundle.policy is None or step < bundle.policy_config.explore_steps
    if exploring:
        return _explore(bundle, x, problem)
    if phi is None:
        phi = bundle.policy.act(x, problem)  # type: ignore[union-attr]
    return _from_result(bundle, phi, x, problem)


def start_bundle(bundle: LearnerBundle) -> LearnerBundle:
    """Sets x_0, the initial (empty-model) policy and the first input."""
    bundle.x = np.asarray(bundle.env.state, dtype=np.float64).copy()
    if bundle.value is not None and bundle.policy is None:
        bundle.policy = bundle.new_policy(version=0)
    bundle.problem = bundle.problem_at(bundle.x)
    bundle.u, bundle.override = _choose_input(bundle, bundle.x, bundle.problem, 0, None)
    if bundle.monitor is not None:
        bundle.monitor.observe(bundle.x)
    return bundle


def algorithm1_step(bundle: LearnerBundle) -> Tuple[LearnerBundle, Dict[str, Any]]:
    """
    One loop body: apply the schedule for step n, take the transition, choose the
    next input from the pre-update certified set, update the dynamics model and
    the value learner, and replace the policy every N_f steps.
    """
    if bundle.x is None:
        start_bundle(bundle)
    n = bundle.n
    env = bundle.env
    apply_schedule(env, n)
    if env.events.relocated:
        bundle.x = np.asarray(env.state, dtype=np.float64).copy()
        bundle.problem = bundle.problem_at(bundle.x)
        phi = bundle.policy.act(bundle.x, bundle.problem) if bundle.policy is not None and n >= bundle.policy_config.explore_steps else None
        bundle.u, bundle.override = _choose_input(bundle, bundle.x, bundle.problem, n, phi)
        if bundle.monitor is not None:
            bundle.monitor.history.clear()
    x, u, problem = bundle.x, bundle.u, bundle.problem
    assert x is not None and u is not None and problem is not None

    margins = margins_batch(problem, u)[0]
    R = reward_eval(bundle.reward, x, u)
    x_next = np.asarray(env.step(u), dtype=np.float64).copy()

    problem_next = bundle.problem_at(x_next)
    phi_next: Optional[SafeControlResult] = None
    if bundle.policy is not None:
        phi_next = bundle.policy.act(x_next, problem_next)
    u_next, override_next = _choose_input(bundle, x_next, problem_next, n + 1, phi_next)

    bundle.learner.update(x, u, x_next)

    z = np.concatenate([x, u])
    psi_pred = math.nan
    shadow_preds: Dict[str, float] = {}
    if bundle.value is not None and phi_next is not None:
        phi_u = phi_next.u if phi_next.u is not None else u_next
        w = np.concatenate([x_next, phi_u])
        psi_pred = bundle.value.psi(z, w)
        bundle.value.update(z, w, R)
        for name, shadow in bundle.shadows.items():
            shadow_preds[name] = shadow.psi(z, w)
            shadow.update(z, w, R)

    policy_update = False
    if bundle.value is not None and n >= 1 and n % bundle.policy_config.update_period == 0:
        version = bundle.policy.version + 1 if bundle.policy is not None else 1
        bundle.policy = bundle.new_policy(version)
        policy_update = True
        logger.info("event=policy_update step=%d version=%d", n, version)
    if n == bundle.policy_config.explore_steps:
        bundle.explore_end_policy = bundle.policy

    if bundle.monitor is not None and bundle.monitor.observe(x_next):
        u_next = turn_inward_override(x_next, bundle.barriers, bundle.low, bundle.high)
        override_next = True

    param_error = bundle.learner.parameter_error()
    row: Dict[str, Any] = {"n": n}
    row.update({f"x{i}": float(v) for i, v in enumerate(x)})
    row.update({f"u{i}": float(v) for i, v in enumerate(u)})
    row["reward"] = R
    for b, m in zip(bundle.barriers, margins):
        row[f"B_{b.name}"] = b.value(x)
        row[f"margin_{b.name}"] = float(m)
    row["margin_min"] = float(margins.min()) if margins.size else math.nan
    row["psi_pred"] = psi_pred
    for name in sorted(bundle.shadows):
        row[f"pred_{name}"] = shadow_preds.get(name, math.nan)
    row["param_error"] = math.nan if param_error is None else param_error
    row["lyapunov"] = lyapunov_value(
        x,
        bundle.learner.parameters(),
        (lambda _h: param_error) if param_error is not None else None,
        bundle.lyapunov_c,
        bundle.barriers,
    )
    row["switch"] = env.events.switched
    row["relocation"] = env.events.relocated
    row["deadlock_override"] = bundle.override
    row["policy_update"] = policy_update
    # outside override rows this stays False
    row["uncertified"] = bool(margins.size) and float(margins.min()) < -CERTIFY_TOL
    row["explore"] = bundle.policy is None or n < bundle.policy_config.explore_steps

    bundle.x, bundle.u, bundle.problem = x_next, u_next, problem_next
    bundle.override = override_next
    bundle.n = n + 1
    return bundle, row


def run_loop(bundle: LearnerBundle, steps: int) -> List[Dict[str, Any]]:
    rows = []
    for _ in range(steps):
        bundle, row = algorithm1_step(bundle)
        rows.append(row)
    return rows


def rollout_horizon(gamma: float, r_max: float, tol: float = 1e-6) -> int:
    """Smallest H with gamma^H r_max < tol."""
    if r_max <= tol:
        return 1
    return int(math.ceil(math.log(tol / r_max) / math.log(gamma)))
