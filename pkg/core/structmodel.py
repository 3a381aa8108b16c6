from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.adafilter import (
    FilterState,
    TransitionWindow,
    admit_or_skip,
    apfbs_update,
    empty_state,
    filter_from_dict,
    filter_to_dict,
    predict,
    prune_zero_atoms,
)
from core.config import ApfbsConfig
from core.envs import wrap_angle
from core.errors import DimensionMismatchError
from core.kernels import Constant, Gaussian, KernelSpec, Linear, Tensor, Weighted


logger = logging.getLogger(__name__)

BLOCKS = ("p", "f", "g")

CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class AffineExtract:
    f_hat: np.ndarray
    g_hat: np.ndarray

    def step(self, u: np.ndarray) -> np.ndarray:
        """Predicted state increment f + g u."""
        return self.f_hat + self.g_hat @ np.atleast_1d(u)


@dataclass(frozen=True)
class BlockLayout:
    """Which state components feed output dimension i, and whether its blocks are constants."""

    state_indices: Tuple[int, ...]
    constant: bool = False


def block_kernels(layout: BlockLayout, n_u: int, sigmas: Sequence[float], tau: float) -> Tuple[List[KernelSpec], List[str]]:
    """
    Kernels of H_p, H_f (x) H_c and H_g (x) H_u over z = [x_sel; u], with
    the block name of each kernel. H_p and H_f are weighted by tau. A
    constant layout has no p-block: on constants it would coincide with f.
    """
    L = len(layout.state_indices)
    if layout.constant:
        kernels: List[KernelSpec] = [Weighted(tau, Constant()), Tensor(Constant(), Linear(), split=L)]
        return kernels, ["f", "g"]
    p = [Weighted(tau, Gaussian(s, L + n_u)) for s in sigmas]
    f = [Weighted(tau, Tensor(Gaussian(s, L), Constant(), split=L)) for s in sigmas]
    g = [Tensor(Gaussian(s, L), Linear(), split=L) for s in sigmas]
    names = ["p"] * len(p) + ["f"] * len(f) + ["g"] * len(g)
    return p + f + g, names


@dataclass(eq=False)
class StructuredModel:
    """
    delta(x, u) = p(x, u) + f(x) + g(x) u estimated per output dimension in
    the direct sum H_p + H_f (x) H_c + H_g (x) H_u.
    """

    n_x: int
    n_u: int
    layouts: List[BlockLayout]
    block_names: List[Tuple[str, ...]]
    states: List[FilterState]
    windows: List[TransitionWindow] = field(default_factory=list)
    angle_dims: Tuple[int, ...] = ()

    def model_input(self, i: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).ravel()
        u = np.atleast_1d(np.asarray(u, dtype=np.float64)).ravel()
        if x.shape[0] != self.n_x or u.shape[0] != self.n_u:
            raise DimensionMismatchError(
                f"structured model expects x in R^{self.n_x} and u in R^{self.n_u}, got {x.shape[0]} and {u.shape[0]}"
            )
        return np.concatenate([x[list(self.layouts[i].state_indices)], u])

    def atom_blocks(self, i: int) -> np.ndarray:
        names = np.array(self.block_names[i])
        return names[self.states[i].dictionary.kernel_ids]


def build_structured_model(
    n_x: int,
    n_u: int,
    sigmas: Sequence[float] = (50.0, 30.0, 10.0, 5.0, 2.0, 1.0),
    tau: float = 0.1,
    r_max: Union[int, Sequence[int]] = 500,
    window: Union[int, Sequence[int]] = 5,
    state_indices: Optional[Sequence[Sequence[int]]] = None,
    constant_dims: Sequence[int] = (),
    angle_dims: Sequence[int] = (),
) -> StructuredModel:
    layouts: List[BlockLayout] = []
    names: List[Tuple[str, ...]] = []
    states: List[FilterState] = []
    windows: List[TransitionWindow] = []
    for i in range(n_x):
        sel = tuple(state_indices[i]) if state_indices is not None else tuple(range(n_x))
        layout = BlockLayout(sel, constant=i in set(constant_dims))
        kernels, blocks = block_kernels(layout, n_u, sigmas, tau)
        cap = r_max[i] if isinstance(r_max, Sequence) else r_max
        s = window[i] if isinstance(window, Sequence) else window
        layouts.append(layout)
        names.append(tuple(blocks))
        states.append(empty_state(kernels, len(sel) + n_u, cap))
        windows.append(TransitionWindow(s))
    return StructuredModel(n_x, n_u, layouts, names, states, windows, tuple(angle_dims))


def predict_delta(model: StructuredModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.array([predict(model.states[i], model.model_input(i, x, u)) for i in range(model.n_x)])


def block_prediction(model: StructuredModel, i: int, block: str, x: np.ndarray, u: np.ndarray) -> float:
    state = model.states[i]
    if state.dictionary.size == 0:
        return 0.0
    k = state.dictionary.features(model.model_input(i, x, u))
    mask = model.atom_blocks(i) == block
    return float(k[mask] @ state.h[mask])


def _per_dim(config: Union[ApfbsConfig, Sequence[ApfbsConfig]], i: int) -> ApfbsConfig:
    if isinstance(config, ApfbsConfig):
        return config
    return config[i]


def update_structured(
    model: StructuredModel,
    x: np.ndarray,
    u: np.ndarray,
    x_next: np.ndarray,
    config: Union[ApfbsConfig, Sequence[ApfbsConfig]],
    prune: bool = True,
) -> StructuredModel:
    """
    One admit-then-APFBS step per output dimension on delta_i = (x_next - x)_i.
    Increments of angle dimensions are wrapped to [-pi, pi).
    """
    delta = np.asarray(x_next, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    if model.angle_dims:
        dims = list(model.angle_dims)
        delta[dims] = wrap_angle(delta[dims])
    states = []
    for i in range(model.n_x):
        cfg = _per_dim(config, i)
        z = model.model_input(i, x, u)
        window = model.windows[i]
        if window.s != cfg.s:
            model.windows[i] = window = TransitionWindow(cfg.s, window.pairs)
        window.push(z, float(delta[i]))
        state = admit_or_skip(model.states[i], z, float(delta[i]), cfg)
        state = apfbs_update(state, window, cfg)
        if prune and cfg.mu > 0:
            state = prune_zero_atoms(state)
        states.append(state)
    return replace(model, states=states)


def extract_affine(model: StructuredModel, x: np.ndarray) -> AffineExtract:
    """f_i from the f-block at x; column j of g from the g-block at (x, e_j), exact by linearity in u."""
    f_hat = np.zeros(model.n_x)
    g_hat = np.zeros((model.n_x, model.n_u))
    zero = np.zeros(model.n_u)
    for i in range(model.n_x):
        f_hat[i] = block_prediction(model, i, "f", x, zero)
        for j in range(model.n_u):
            e = np.zeros(model.n_u)
            e[j] = 1.0
            g_hat[i, j] = block_prediction(model, i, "g", x, e)
    return AffineExtract(f_hat, g_hat)


@dataclass(frozen=True)
class SparsityReport:
    rows: List[Dict[str, object]]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["dim", "block", "l1_mass", "atoms"])

    def mass(self, block: str) -> float:
        return float(sum(r["l1_mass"] for r in self.rows if r["block"] == block))

    def ratio(self, numerator: str = "p", denominator: str = "g") -> float:
        den = self.mass(denominator)
        num = self.mass(numerator)
        if den == 0.0:
            return 0.0 if num == 0.0 else float("inf")
        return num / den


def sparsity_report(model: StructuredModel) -> SparsityReport:
    rows: List[Dict[str, object]] = []
    for i in range(model.n_x):
        blocks = model.atom_blocks(i)
        h = model.states[i].h
        for b in BLOCKS:
            mask = blocks == b
            rows.append({"dim": i, "block": b, "l1_mass": float(np.abs(h[mask]).sum()), "atoms": int(mask.sum())})
    return SparsityReport(rows)


def model_to_dict(model: StructuredModel) -> Dict[str, object]:
    return {
        "n_x": model.n_x,
        "n_u": model.n_u,
        "layouts": [{"state_indices": list(l.state_indices), "constant": l.constant} for l in model.layouts],
        "blocks": [list(b) for b in model.block_names],
        "filters": [filter_to_dict(s) for s in model.states],
        "windows": [w.s for w in model.windows],
        "angle_dims": list(model.angle_dims),
    }


def model_from_dict(payload: Dict[str, object]) -> StructuredModel:
    layouts = [BlockLayout(tuple(l["state_indices"]), bool(l["constant"])) for l in payload["layouts"]]  # type: ignore[index]
    return StructuredModel(
        n_x=int(payload["n_x"]),  # type: ignore[arg-type]
        n_u=int(payload["n_u"]),  # type: ignore[arg-type]
        layouts=layouts,
        block_names=[tuple(b) for b in payload["blocks"]],  # type: ignore[union-attr]
        states=[filter_from_dict(f) for f in payload["filters"]],  # type: ignore[union-attr]
        windows=[TransitionWindow(int(s)) for s in payload["windows"]],  # type: ignore[union-attr]
        angle_dims=tuple(int(d) for d in payload.get("angle_dims", [])),  # type: ignore[union-attr]
    )


# --- parametric model learning ---------------------------------------------


@dataclass(frozen=True, eq=False)
class ParametricModel:
    """x_next = Xi(z) h; Xi maps z = [x; u] to an n_x-by-r basis matrix."""

    basis: Callable[[np.ndarray], np.ndarray]
    h: np.ndarray
    lam: float = 0.6
    skipped: int = 0
    last_skipped: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.lam < 2.0:
            raise ValueError("parametric step size must lie in (0, 2)")


def parametric_update(model: ParametricModel, z: np.ndarray, x_next: np.ndarray) -> ParametricModel:
    """h <- h - lam Xi^T (Xi Xi^T)^-1 (Xi h - x_next); skipped when Xi Xi^T is near-singular."""
    Xi = np.asarray(model.basis(np.asarray(z, dtype=np.float64)), dtype=np.float64)
    G = Xi @ Xi.T
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        logger.debug("event=parametric_skip cond=%.3e", cond)
        return replace(model, skipped=model.skipped + 1, last_skipped=True)
    residual = Xi @ model.h - np.asarray(x_next, dtype=np.float64)
    h_new = model.h - model.lam * Xi.T @ np.linalg.solve(G, residual)
    return replace(model, h=h_new, last_skipped=False)


def parametric_affine(model: ParametricModel, x: np.ndarray, n_u: int) -> AffineExtract:
    x = np.asarray(x, dtype=np.float64)
    base = model.basis(np.concatenate([x, np.zeros(n_u)])) @ model.h
    g = np.zeros((x.shape[0], n_u))
    for j in range(n_u):
        e = np.zeros(n_u)
        e[j] = 1.0
        g[:, j] = model.basis(np.concatenate([x, e])) @ model.h - base
    return AffineExtract(base - x, g)


# --- learners behind one interface ------------------------------------------


class DynamicsLearner(Protocol):
    n_u: int

    def affine(self, x: np.ndarray) -> AffineExtract: ...

    def update(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> None: ...

    def parameter_error(self) -> Optional[float]: ...

    def parameters(self) -> Optional[np.ndarray]: ...


class StructuredLearner:
    def __init__(self, model: StructuredModel, config: Union[ApfbsConfig, Sequence[ApfbsConfig]]):
        self.model = model
        self.config = config
        self.n_u = model.n_u

    def affine(self, x: np.ndarray) -> AffineExtract:
        return extract_affine(self.model, x)

    def update(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> None:
        self.model = update_structured(self.model, x, u, x_next, self.config)

    def parameter_error(self) -> Optional[float]:
        return None

    def parameters(self) -> Optional[np.ndarray]:
        return None


class ParametricLearner:
    def __init__(self, model: ParametricModel, n_u: int, truth: Optional[Callable[[], np.ndarray]] = None):
        self.model = model
        self.n_u = n_u
        self.truth = truth

    def affine(self, x: np.ndarray) -> AffineExtract:
        return parametric_affine(self.model, x, self.n_u)

    def update(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> None:
        z = np.concatenate([np.asarray(x, dtype=np.float64), np.atleast_1d(u)])
        self.model = parametric_update(self.model, z, x_next)

    def parameter_error(self) -> Optional[float]:
        if self.truth is None:
            return None
        return float(np.linalg.norm(self.model.h - self.truth()))

    def parameters(self) -> Optional[np.ndarray]:
        return self.model.h


class ExactLearner:
    """Uses the true increment map; nothing is learned."""

    def __init__(self, true_affine: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]], n_u: int):
        self.true_affine = true_affine
        self.n_u = n_u

    def affine(self, x: np.ndarray) -> AffineExtract:
        f, g = self.true_affine(np.asarray(x, dtype=np.float64))
        return AffineExtract(np.asarray(f, dtype=np.float64), np.atleast_2d(np.asarray(g, dtype=np.float64)))

    def update(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> None:
        return None

    def parameter_error(self) -> Optional[float]:
        return 0.0

    def parameters(self) -> Optional[np.ndarray]:
        return None
