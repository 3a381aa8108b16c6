from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from core.errors import DimensionMismatchError, SingularSystemError
from core.kernels import KernelSpec, Paired
from core.structmodel import AffineExtract, parametric_affine, ParametricModel


logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6


def robust_cho_factor(A: np.ndarray) -> Tuple[np.ndarray, bool]:
    """
    Cholesky factor of a symmetric positive-definite matrix. On failure the
    diagonal is shifted by 1e-10, then ten times more, up to 1e-6.
    """
    A = 0.5 * (A + A.T)
    try:
        return cho_factor(A, lower=True, check_finite=False)
    except LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(A.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            factor = cho_factor(A + jitter * eye, lower=True, check_finite=False)
            logger.debug("event=cholesky_jitter jitter=%.1e size=%d", jitter, A.shape[0])
            return factor
        except LinAlgError:
            jitter *= 10.0
    raise SingularSystemError(f"matrix of size {A.shape[0]} is not positive definite even with jitter {JITTER_MAX:g}")


def difference_matrix(n_d: int, gamma: float) -> np.ndarray:
    """N_d x (N_d + 1) matrix with 1 at (i, i) and -gamma at (i, i + 1)."""
    H = np.zeros((n_d, n_d + 1))
    idx = np.arange(n_d)
    H[idx, idx] = 1.0
    H[idx, idx + 1] = -gamma
    return H


@dataclass(frozen=True, eq=False)
class GpSarsaState:
    """
    Inputs z_0..z_{N_d}, rewards R_0..R_{N_d - 1} and diagonal noise. With
    freeze_at below N_d, only the first freeze_at inputs span the regression basis.
    """

    kernel: KernelSpec
    gamma: float
    Z: np.ndarray
    R: np.ndarray
    noise: np.ndarray
    freeze_at: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "Z", np.atleast_2d(np.asarray(self.Z, dtype=np.float64)))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).ravel())
        noise = np.asarray(self.noise, dtype=np.float64)
        if noise.ndim == 0:
            noise = np.full(self.R.shape[0], float(noise))
        object.__setattr__(self, "noise", noise)
        if self.Z.shape[0] != self.R.shape[0] + 1:
            raise DimensionMismatchError(f"{self.Z.shape[0]} inputs need {self.Z.shape[0] - 1} rewards, got {self.R.shape[0]}")
        if self.noise.shape != self.R.shape or np.any(self.noise <= 0):
            raise ValueError("noise must be one positive variance per reward")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("discount factor must lie in [0, 1)")

    @property
    def n_d(self) -> int:
        return int(self.R.shape[0])

    @property
    def H(self) -> np.ndarray:
        return difference_matrix(self.n_d, self.gamma)

    @property
    def basis_size(self) -> int:
        """All N_d + 1 inputs when unfrozen or when freeze_at >= N_d."""
        n_inputs = self.Z.shape[0]
        if self.freeze_at is None or self.freeze_at >= self.n_d:
            return n_inputs
        return self.freeze_at


def _query(z_star: np.ndarray, dim: int) -> np.ndarray:
    q = np.atleast_2d(np.asarray(z_star, dtype=np.float64))
    if q.shape[1] != dim:
        raise DimensionMismatchError(f"query has dimension {q.shape[1]}, expected {dim}")
    return q


def _exact_posterior(state: GpSarsaState, z_star: np.ndarray) -> Tuple[float, float]:
    q = _query(z_star, state.Z.shape[1])
    H = state.H
    K = state.kernel.cross(state.Z, state.Z)
    k_star = state.kernel.cross(state.Z, q)[:, 0]
    A = H @ K @ H.T + np.diag(state.noise)
    factor = robust_cho_factor(A)
    Hk = H @ k_star
    mean = float(Hk @ cho_solve(factor, state.R))
    var = float(state.kernel.cross(q, q)[0, 0] - Hk @ cho_solve(factor, Hk))
    return mean, var


def _dtc_posterior(state: GpSarsaState, z_star: np.ndarray, F: Optional[int] = None) -> Tuple[float, float]:
    """Restricted regression on the basis z_0..z_{F-1}; F defaults to the state's basis size."""
    q = _query(z_star, state.Z.shape[1])
    prior = float(state.kernel.cross(q, q)[0, 0])
    F = state.basis_size if F is None else int(F)
    if F == 0:
        return 0.0, prior
    C = state.Z[:F]
    K_FF = state.kernel.cross(C, C)
    Phi = state.H @ state.kernel.cross(state.Z, C)
    w = 1.0 / state.noise
    P = K_FF + Phi.T @ (w[:, None] * Phi)
    k_F = state.kernel.cross(C, q)[:, 0]
    P_factor = robust_cho_factor(P)
    K_factor = robust_cho_factor(K_FF)
    mean = float(k_F @ cho_solve(P_factor, Phi.T @ (w * state.R)))
    var = prior - float(k_F @ cho_solve(K_factor, k_F)) + float(k_F @ cho_solve(P_factor, k_F))
    return mean, var


def gp_sarsa_posterior(state: GpSarsaState, z_star: np.ndarray) -> Tuple[float, float]:
    """Posterior mean and variance of Q(z*) from the reward differences H Q = R + noise."""
    if state.n_d < 1:
        raise ValueError("GP SARSA needs at least one reward")
    if state.basis_size < state.Z.shape[0]:
        return _dtc_posterior(state, z_star)
    return _exact_posterior(state, z_star)


def psi_route_posterior(state: GpSarsaState, z_star: np.ndarray) -> Tuple[float, float]:
    """
    The same posterior computed in the paired space: GP regression of the rewards
    on the pairs [z_i; z_{i+1}] under the paired kernel, mapped back to Q(z*)
    through k^Q_i(z*) = k(z*, z_i) - gamma k(z*, z_{i+1}).
    """
    if state.n_d < 1:
        raise ValueError("GP SARSA needs at least one reward")
    q = _query(z_star, state.Z.shape[1])
    dim = state.Z.shape[1]
    paired = Paired(state.kernel, state.gamma, split=dim)
    pairs = np.hstack([state.Z[:-1], state.Z[1:]])
    K_psi = paired.cross(pairs, pairs)
    k_q = paired.unpaired(q, pairs)[0]
    factor = robust_cho_factor(K_psi + np.diag(state.noise))
    mean = float(k_q @ cho_solve(factor, state.R))
    var = float(state.kernel.cross(q, q)[0, 0] - k_q @ cho_solve(factor, k_q))
    return mean, var


def gp_sarsa2_mode(state: GpSarsaState, freeze_at: int) -> GpSarsaState:
    """
    Restricts the regression basis to the first freeze_at inputs. freeze_at >= N_d
    keeps every input and is identical to the unfrozen posterior.
    """
    if freeze_at < 0:
        raise ValueError("freeze index must be nonnegative")
    return replace(state, freeze_at=int(freeze_at))


class OnlineGpSarsa:
    """
    GP SARSA run inside the learning loop. Every input z_n becomes a basis
    center until max_basis centers exist; after that only the statistics of
    the restricted regression grow. Posterior weights are refreshed every
    refresh_every updates.
    """

    def __init__(self, kernel: KernelSpec, gamma: float, noise: float = 1e-6, max_basis: int = 600, refresh_every: int = 100):
        self.kernel = kernel
        self.gamma = gamma
        self.noise = noise
        self.max_basis = max_basis
        self.refresh_every = refresh_every
        self.centers: Optional[np.ndarray] = None
        self.pairs: List[np.ndarray] = []
        self.rewards: List[float] = []
        self.Phi: Optional[np.ndarray] = None
        self.A: Optional[np.ndarray] = None
        self.b: Optional[np.ndarray] = None
        self.alpha = np.zeros(0)
        self._since_refresh = 0

    @property
    def frozen(self) -> bool:
        return self.A is not None

    @property
    def basis_size(self) -> int:
        return 0 if self.centers is None else int(self.centers.shape[0])

    def _row(self, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        assert self.centers is not None
        pts = np.vstack([z, w])
        K = self.kernel.cross(pts, self.centers)
        return K[0] - self.gamma * K[1]

    def _add_center(self, z: np.ndarray) -> None:
        if self.centers is None:
            self.centers = z[None, :].copy()
        else:
            self.centers = np.vstack([self.centers, z])
        if self.pairs:
            P = np.asarray(self.pairs)
            d = z.shape[0]
            col = self.kernel.cross(P[:, :d], z[None, :])[:, 0] - self.gamma * self.kernel.cross(P[:, d:], z[None, :])[:, 0]
            assert self.Phi is not None
            self.Phi = np.hstack([self.Phi, col[:, None]])
        else:
            self.Phi = np.zeros((0, 1))
        self.alpha = np.concatenate([self.alpha, [0.0]])

    def update(self, z: np.ndarray, w: np.ndarray, reward: float) -> None:
        z = np.asarray(z, dtype=np.float64).ravel()
        w = np.asarray(w, dtype=np.float64).ravel()
        if not self.frozen and self.basis_size < self.max_basis:
            self._add_center(z)
        if self.centers is None:
            return
        row = self._row(z, w)
        if self.frozen:
            assert self.A is not None and self.b is not None
            self.A += np.outer(row, row) / self.noise
            self.b += row * reward / self.noise
        else:
            assert self.Phi is not None
            self.Phi = np.vstack([self.Phi, row[None, :]])
            self.pairs.append(np.concatenate([z, w]))
            self.rewards.append(float(reward))
            if self.basis_size >= self.max_basis:
                self.A = self.Phi.T @ self.Phi / self.noise
                self.b = self.Phi.T @ np.asarray(self.rewards) / self.noise
                self.Phi = None
                self.pairs = []
                logger.info("event=gp_basis_frozen size=%d", self.basis_size)
        self._since_refresh += 1
        if self._since_refresh >= self.refresh_every:
            self.refresh()

    def refresh(self) -> None:
        self._since_refresh = 0
        if self.centers is None:
            return
        K_FF = self.kernel.cross(self.centers, self.centers)
        if self.frozen:
            A, b = self.A, self.b
        else:
            assert self.Phi is not None
            A = self.Phi.T @ self.Phi / self.noise
            b = self.Phi.T @ np.asarray(self.rewards) / self.noise
        self.alpha = cho_solve(robust_cho_factor(K_FF + A), b)

    def q(self, z: np.ndarray) -> float:
        if self.centers is None:
            return 0.0
        k = self.kernel.cross(np.atleast_2d(np.asarray(z, dtype=np.float64)), self.centers)[0]
        return float(k @ self.alpha)

    def psi(self, z: np.ndarray, w: np.ndarray) -> float:
        return self.q(z) - self.gamma * self.q(w)

    def snapshot(self) -> Callable[[np.ndarray], float]:
        if self.centers is None:
            return lambda z: 0.0
        centers, alpha, kernel = self.centers.copy(), self.alpha.copy(), self.kernel
        return lambda z: float(kernel.cross(np.atleast_2d(np.asarray(z, dtype=np.float64)), centers)[0] @ alpha)


# --- Bayesian linear regression for the parametric model ----------------------------


@dataclass(frozen=True, eq=False)
class BayesLinearState:
    """Gaussian posterior over h in precision form: precision and precision-weighted mean."""

    precision: np.ndarray
    moment: np.ndarray
    noise_variance: float = 0.01

    @property
    def mean(self) -> np.ndarray:
        return cho_solve(robust_cho_factor(self.precision), self.moment)

    @property
    def covariance(self) -> np.ndarray:
        return cho_solve(robust_cho_factor(self.precision), np.eye(self.precision.shape[0]))


def bayes_linear_prior(prior_mean: np.ndarray, prior_variance: float = 25.0, noise_variance: float = 0.01) -> BayesLinearState:
    m0 = np.asarray(prior_mean, dtype=np.float64)
    Lambda0 = np.eye(m0.shape[0]) / prior_variance
    return BayesLinearState(Lambda0, Lambda0 @ m0, noise_variance)


def bayes_linear_update(state: BayesLinearState, Xi: np.ndarray, x_next: np.ndarray) -> BayesLinearState:
    """Conjugate update for x_next = Xi h + noise."""
    Xi = np.atleast_2d(np.asarray(Xi, dtype=np.float64))
    x_next = np.asarray(x_next, dtype=np.float64).ravel()
    if Xi.shape != (x_next.shape[0], state.precision.shape[0]):
        raise DimensionMismatchError(f"basis of shape {Xi.shape} does not fit {x_next.shape[0]} outputs and {state.precision.shape[0]} parameters")
    return replace(
        state,
        precision=state.precision + Xi.T @ Xi / state.noise_variance,
        moment=state.moment + Xi.T @ x_next / state.noise_variance,
    )


class BayesLinearLearner:
    def __init__(
        self,
        state: BayesLinearState,
        basis: Callable[[np.ndarray], np.ndarray],
        n_u: int,
        truth: Optional[Callable[[], np.ndarray]] = None,
    ):
        self.state = state
        self.basis = basis
        self.n_u = n_u
        self.truth = truth
        self._mean = state.mean

    def affine(self, x: np.ndarray) -> AffineExtract:
        return parametric_affine(ParametricModel(self.basis, self._mean), x, self.n_u)

    def update(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> None:
        z = np.concatenate([np.asarray(x, dtype=np.float64), np.atleast_1d(u)])
        self.state = bayes_linear_update(self.state, self.basis(z), x_next)
        self._mean = self.state.mean

    def parameter_error(self) -> Optional[float]:
        if self.truth is None:
            return None
        return float(np.linalg.norm(self._mean - self.truth()))

    def parameters(self) -> Optional[np.ndarray]:
        return self._mean
