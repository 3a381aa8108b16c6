from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Deque, Dict, List, Sequence, Tuple

import numpy as np

from core.config import ApfbsConfig
from core.errors import DimensionMismatchError
from core.kernels import KernelSpec, kernel_from_dict


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """
    Kernel atoms kappa_m(., z~) of a multikernel filter.

    Atom j is (kernel_ids[j], centers[j]); order is append-only except for
    explicit pruning, so coefficient j always addresses the same atom.
    """

    kernels: Tuple[KernelSpec, ...]
    input_dim: int
    r_max: int
    centers: np.ndarray = field(default=None)  # type: ignore[assignment]
    kernel_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.centers is None:
            object.__setattr__(self, "centers", np.zeros((0, self.input_dim)))
        if self.kernel_ids is None:
            object.__setattr__(self, "kernel_ids", np.zeros(0, dtype=np.int64))
        if self.centers.shape[0] != self.kernel_ids.shape[0]:
            raise ValueError("centers and kernel ids must have the same length")

    @property
    def size(self) -> int:
        return int(self.kernel_ids.shape[0])

    @property
    def sizes(self) -> List[int]:
        return [int(np.sum(self.kernel_ids == m)) for m in range(len(self.kernels))]

    def _rows(self, Z: Any) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.input_dim:
            raise DimensionMismatchError(f"filter input has dimension {Z.shape[1]}, expected {self.input_dim}")
        return Z

    def features_batch(self, Z: Any) -> np.ndarray:
        Z = self._rows(Z)
        out = np.zeros((Z.shape[0], self.size))
        for m, kernel in enumerate(self.kernels):
            idx = np.flatnonzero(self.kernel_ids == m)
            if idx.size:
                out[:, idx] = kernel.cross(Z, self.centers[idx])
        return out

    def features(self, z: Any) -> np.ndarray:
        return self.features_batch(z)[0]

    def append(self, z: Any) -> "Dictionary":
        z = self._rows(z)[0]
        M = len(self.kernels)
        centers = np.vstack([self.centers, np.tile(z, (M, 1))])
        ids = np.concatenate([self.kernel_ids, np.arange(M, dtype=np.int64)])
        return replace(self, centers=centers, kernel_ids=ids)

    def keep(self, mask: np.ndarray) -> "Dictionary":
        return replace(self, centers=self.centers[mask], kernel_ids=self.kernel_ids[mask])


@dataclass(frozen=True, eq=False)
class FilterState:
    dictionary: Dictionary
    h: np.ndarray

    def __post_init__(self) -> None:
        if self.h.shape != (self.dictionary.size,):
            raise ValueError(f"coefficient length {self.h.shape} does not match dictionary size {self.dictionary.size}")


@dataclass
class TransitionWindow:
    """The last s input/output pairs, oldest first."""

    s: int
    pairs: Deque[Tuple[np.ndarray, float]] = field(default_factory=deque)

    def __post_init__(self) -> None:
        self.pairs = deque(self.pairs, maxlen=self.s)

    def push(self, z: Any, delta: float) -> "TransitionWindow":
        self.pairs.append((np.asarray(z, dtype=np.float64).ravel().copy(), float(delta)))
        return self

    def __len__(self) -> int:
        return len(self.pairs)


def empty_state(kernels: Sequence[KernelSpec], input_dim: int, r_max: int) -> FilterState:
    return FilterState(Dictionary(tuple(kernels), int(input_dim), int(r_max)), np.zeros(0))


def predict(state: FilterState, z: Any) -> float:
    if state.dictionary.size == 0:
        state.dictionary._rows(z)
        return 0.0
    return float(state.dictionary.features(z) @ state.h)


def project_hyperslab(h: np.ndarray, k: np.ndarray, delta: float, eps1: float) -> np.ndarray:
    """Euclidean projection onto {h : |h.k - delta| <= eps1}."""
    h = np.asarray(h, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    err = float(h @ k) - delta
    if abs(err) <= eps1:
        return h.copy()
    nk = float(k @ k)
    if nk == 0.0:
        return h.copy()
    shift = err - eps1 if err > 0 else err + eps1
    return h - (shift / nk) * k


def soft_threshold(h: np.ndarray, t: float) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if t <= 0:
        return h.copy()
    return np.sign(h) * np.maximum(np.abs(h) - t, 0.0)


def averaged_projection(h: np.ndarray, K: np.ndarray, deltas: np.ndarray, eps1: float) -> np.ndarray:
    """Mean of the hyperslab projections of h for the rows of K (vectorized project_hyperslab)."""
    err = K @ h - deltas
    shift = np.where(err > eps1, err - eps1, np.where(err < -eps1, err + eps1, 0.0))
    norms = np.einsum("ij,ij->i", K, K)
    coef = np.divide(shift, norms, out=np.zeros_like(shift), where=norms > 0)
    return h - (coef @ K) / K.shape[0]


def apfbs_update(state: FilterState, window: TransitionWindow, config: ApfbsConfig) -> FilterState:
    """h <- prox_{lam mu}[(1 - lam) I + lam * mean_i P_{C_i}](h) over the current window."""
    if len(window) == 0 or state.dictionary.size == 0:
        return state
    Z = np.stack([z for z, _ in window.pairs])
    deltas = np.array([d for _, d in window.pairs])
    K = state.dictionary.features_batch(Z)
    h = state.h
    avg = averaged_projection(h, K, deltas, config.eps1)
    h_new = (1.0 - config.lam) * h + config.lam * avg
    h_new = soft_threshold(h_new, config.lam * config.mu)
    return replace(state, h=h_new)


def admit_or_skip(state: FilterState, z: Any, delta: float, config: ApfbsConfig) -> FilterState:
    """
    Appends {kappa_m(., z)} with zero coefficients when the dictionary has room
    and |delta - psi(z)|^2 > eps2 |psi(z)|^2.
    """
    d = state.dictionary
    M = len(d.kernels)
    if d.size + M > d.r_max:
        return state
    psi = predict(state, z)
    if (delta - psi) ** 2 <= config.eps2 * psi**2:
        return state
    logger.debug("event=admit size=%d added=%d", d.size, M)
    return FilterState(d.append(z), np.concatenate([state.h, np.zeros(M)]))


def prune_zero_atoms(state: FilterState, tol: float = 0.0) -> FilterState:
    mask = np.abs(state.h) > tol
    if mask.all():
        return state
    logger.debug("event=prune removed=%d", int((~mask).sum()))
    return FilterState(state.dictionary.keep(mask), state.h[mask])


class AdaptiveFilter:
    """
    One learner: a FilterState, its transition window and its configuration.

    learn() runs the admit-then-update step of a single input/output pair and
    returns the a priori prediction.
    """

    def __init__(self, state: FilterState, config: ApfbsConfig, prune: bool = True):
        self.state = state
        self.config = config
        self.window = TransitionWindow(config.s)
        self.prune = prune

    def predict(self, z: Any) -> float:
        return predict(self.state, z)

    def learn(self, z: Any, delta: float) -> float:
        prior = predict(self.state, z)
        self.window.push(z, delta)
        state = admit_or_skip(self.state, z, delta, self.config)
        state = apfbs_update(state, self.window, self.config)
        if self.prune and self.config.mu > 0:
            state = prune_zero_atoms(state)
        self.state = state
        return prior


def filter_to_dict(state: FilterState) -> Dict[str, Any]:
    d = state.dictionary
    return {
        "kernels": [k.to_dict() for k in d.kernels],
        "input_dim": d.input_dim,
        "r_max": d.r_max,
        "centers": d.centers.tolist(),
        "kernel_ids": d.kernel_ids.tolist(),
        "h": state.h.tolist(),
    }


def filter_from_dict(payload: Dict[str, Any]) -> FilterState:
    input_dim = int(payload["input_dim"])
    centers = np.asarray(payload["centers"], dtype=np.float64).reshape(-1, input_dim)
    d = Dictionary(
        kernels=tuple(kernel_from_dict(k) for k in payload["kernels"]),
        input_dim=input_dim,
        r_max=int(payload["r_max"]),
        centers=centers,
        kernel_ids=np.asarray(payload["kernel_ids"], dtype=np.int64),
    )
    return FilterState(d, np.asarray(payload["h"], dtype=np.float64))


def filter_to_json(state: FilterState) -> str:
    return json.dumps(filter_to_dict(state))


def filter_from_json(text: str) -> FilterState:
    return filter_from_dict(json.loads(text))
