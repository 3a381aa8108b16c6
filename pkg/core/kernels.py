from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from core.errors import DimensionMismatchError


def _as_rows(points: Any) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr


class KernelSpec:
    """
    Immutable descriptor of a positive-definite kernel.

    Subclasses implement cross(X, Y) on row-stacked inputs; everything else
    (pointwise evaluation, Gram matrices, serialization) is shared.
    """

    kind = "abstract"

    @property
    def input_dim(self) -> Optional[int]:
        return None

    def cross(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check(self, X: np.ndarray) -> None:
        dim = self.input_dim
        if dim is not None and X.shape[1] != dim:
            raise DimensionMismatchError(
                f"{self.kind} kernel expects inputs of dimension {dim}, got {X.shape[1]}"
            )

    def __call__(self, a: Any, b: Any) -> float:
        return eval_kernel(self, a, b)

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(KernelSpec):
    """exp(-|a-b|^2 / 2 sigma^2) with the normalizing prefactor 1/(2 pi sigma^2)^(L/2)."""

    sigma: float
    dim: int
    kind = "gaussian"

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("gaussian scale must be positive")
        if self.dim < 1:
            raise ValueError("gaussian input dimension must be positive")

    @property
    def input_dim(self) -> Optional[int]:
        return self.dim

    @property
    def prefactor(self) -> float:
        return (2.0 * math.pi * self.sigma**2) ** (-0.5 * self.dim)

    def cross(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        self.check(X)
        self.check(Y)
        sq = cdist(X, Y, metric="sqeuclidean")
        return self.prefactor * np.exp(-sq / (2.0 * self.sigma**2))

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "sigma": self.sigma, "dim": self.dim}


@dataclass(frozen=True)
class Polynomial(KernelSpec):
    """(a.b + c)^d."""

    c: float = 0.0
    d: int = 1
    kind = "polynomial"

    def __post_init__(self) -> None:
        if self.c < 0:
            raise ValueError("polynomial offset must be nonnegative")
        if self.d < 1:
            raise ValueError("polynomial degree must be a positive integer")

    def cross(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        if X.shape[1] != Y.shape[1]:
            raise DimensionMismatchError(
                f"polynomial kernel inputs differ in dimension: {X.shape[1]} vs {Y.shape[1]}"
            )
        return (X @ Y.T + self.c) ** self.d

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "c": self.c, "d": self.d}


def Linear() -> Polynomial:
    return Polynomial(c=0.0, d=1)


@dataclass(frozen=True)
class Constant(KernelSpec):
    kind = "constant"

    def cross(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return np.ones((X.shape[0], Y.shape[0]))

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Weighted(KernelSpec):
    """tau * inner; the RKHS norm scales by 1/tau."""

    tau: float
    inner: KernelSpec
    kind = "weighted"

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("kernel weight must be positive")

    @property
    def input_dim(self) -> Optional[int]:
        return self.inner.input_dim

    def cross(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return self.tau * self.inner.cross(X, Y)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "tau": self.tau, "inner": self.inner.to_dict()}


@dataclass(frozen=True)
class Tensor(KernelSpec):
    """left(a[:split], b[:split]) * right(a[split:], b[split:])."""

    left: KernelSpec
    right: KernelSpec
    split: int
    kind = "tensor"

    @property
    def input_dim(self) -> Optional[int]:
        r = self.right.input_dim
        if r is None:
            return None
        return self.split + r

    def cross(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        for arr in (X, Y):
            if arr.shape[1] < self.split:
                raise DimensionMismatchError(
                    f"tensor kernel splits at {self.split} but input has dimension {arr.shape[1]}"
                )
        self.check(X)
        left = self.left.cross(X[:, : self.split], Y[:, : self.split])
        right = self.right.cross(X[:, self.split :], Y[:, self.split :])
        return left * right

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
            "split": self.split,
        }


@dataclass(frozen=True)
class Paired(KernelSpec):
    """
    Kernel of the paired-input space over [z; w]:
    (k(z, z~) - g k(z, w~)) - g (k(w, z~) - g k(w, w~)).
    """

    base: KernelSpec
    gamma: float
    split: int
    kind = "paired"

    @property
    def input_dim(self) -> Optional[int]:
        return 2 * self.split

    def cross(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        self.check(X)
        self.check(Y)
        s, g = self.split, self.gamma
        Zx, Wx = X[:, :s], X[:, s:]
        Zy, Wy = Y[:, :s], Y[:, s:]
        k = self.base.cross
        return (k(Zx, Zy) - g * k(Zx, Wy)) - g * (k(Wx, Zy) - g * k(Wx, Wy))

    def unpaired(self, X: np.ndarray, centers: np.ndarray) -> np.ndarray:
        """Evaluations of U^-1 of each paired atom: k(z, z~_j) - g k(z, w~_j)."""
        s = self.split
        return self.base.cross(X, centers[:, :s]) - self.gamma * self.base.cross(X, centers[:, s:])

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "base": self.base.to_dict(), "gamma": self.gamma, "split": self.split}


def control_kernel() -> KernelSpec:
    """1 + u.v/4, written as 0.25 * (u.v + 4)."""
    return Weighted(0.25, Polynomial(c=4.0, d=1))


def eval_kernel(spec: KernelSpec, a: Any, b: Any) -> float:
    A, B = _as_rows(a), _as_rows(b)
    if A.shape[0] != 1 or B.shape[0] != 1:
        raise DimensionMismatchError("eval_kernel takes single input vectors")
    return float(spec.cross(A, B)[0, 0])


def gram_matrix(spec: KernelSpec, points: Sequence[Any]) -> np.ndarray:
    if len(points) == 0:
        return np.zeros((0, 0))
    X = _as_rows(np.stack([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in points]))
    G = spec.cross(X, X)
    return 0.5 * (G + G.T)


def kernel_from_dict(payload: Dict[str, Any]) -> KernelSpec:
    kind = payload.get("kind")
    if kind == "gaussian":
        return Gaussian(sigma=float(payload["sigma"]), dim=int(payload["dim"]))
    if kind == "polynomial":
        return Polynomial(c=float(payload["c"]), d=int(payload["d"]))
    if kind == "constant":
        return Constant()
    if kind == "weighted":
        return Weighted(tau=float(payload["tau"]), inner=kernel_from_dict(payload["inner"]))
    if kind == "tensor":
        return Tensor(
            left=kernel_from_dict(payload["left"]),
            right=kernel_from_dict(payload["right"]),
            split=int(payload["split"]),
        )
    if kind == "paired":
        return Paired(base=kernel_from_dict(payload["base"]), gamma=float(payload["gamma"]), split=int(payload["split"]))
    raise ValueError(f"unknown kernel kind: {kind!r}")
