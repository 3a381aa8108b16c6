from __future__ import annotations

import math
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd


NMSE_WINDOW = 100
NMSE_SMOOTHING = 100


def compute_nmse(predictions: Sequence[float], rewards: Sequence[float]) -> Optional[float]:
    """
    sum (pred - R)^2 / sum R^2 over one window. None when every reward is zero
    (the ratio is undefined and is written as a blank).
    """
    p = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if p.shape != r.shape or p.size == 0:
        raise ValueError("NMSE needs a nonempty window of matching predictions and rewards")
    den = float(r @ r)
    if den == 0.0:
        return None
    return float(((p - r) ** 2).sum() / den)


def nmse_series(
    frame: pd.DataFrame,
    pred_col: str = "psi_pred",
    reward_col: str = "reward",
    window: int = NMSE_WINDOW,
    smoothing: int = NMSE_SMOOTHING,
) -> pd.Series:
    """Sliding-window NMSE of the a priori predictions, then a moving average."""
    err = (frame[pred_col] - frame[reward_col]) ** 2
    num = err.rolling(window, min_periods=1).sum()
    den = (frame[reward_col] ** 2).rolling(window, min_periods=1).sum()
    ratio = num.where(den > 0) / den.where(den > 0)
    return ratio.rolling(smoothing, min_periods=1).mean()


def barrier_columns(frame: pd.DataFrame) -> List[str]:
    return [c for c in frame.columns if c.startswith("B_")]


def min_barrier(frame: pd.DataFrame) -> pd.Series:
    cols = barrier_columns(frame)
    if not cols:
        return pd.Series(np.inf, index=frame.index)
    return frame[cols].min(axis=1)


def recovery_step(frame: pd.DataFrame, after: int) -> Optional[int]:
    """First step n > after from which every barrier stays nonnegative to the end of the run."""
    b = min_barrier(frame)
    n = frame["n"]
    unsafe = n[(b < 0) & (n > after)]
    candidates = n[n > after]
    if candidates.empty:
        return None
    if unsafe.empty:
        return int(candidates.iloc[0])
    later = n[n > unsafe.iloc[-1]]
    return None if later.empty else int(later.iloc[0])


def value_at(series: pd.Series, frame: pd.DataFrame, step: int) -> float:
    hit = series[frame["n"] == step]
    if hit.empty:
        return math.nan
    return float(hit.iloc[0])


def mean_std(values: Iterable[float]) -> Dict[str, float]:
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return {"mean": math.nan, "std": math.nan, "count": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0, "count": int(arr.size)}


def summarize_run(frame: pd.DataFrame, switch_steps: Sequence[int] = ()) -> Dict[str, object]:
    """Scalar summary of one metrics table."""
    summary: Dict[str, object] = {"steps": int(len(frame))}
    if frame.empty:
        return summary
    b = min_barrier(frame)
    summary["min_barrier"] = float(b.min())
    summary["final_min_barrier"] = float(b.iloc[-1])
    flagged = frame["deadlock_override"]
    if "margin_min" in frame:
        ok = frame["margin_min"].fillna(np.inf) >= -1e-9
        summary["certified_fraction"] = float(ok.mean())
        summary["unflagged_violations"] = int((~ok & ~flagged).sum())
    summary["uncertified_steps"] = int(frame["uncertified"].sum())
    summary["deadlock_overrides"] = int(frame["deadlock_override"].sum())
    summary["policy_updates"] = int(frame["policy_update"].sum())
    if frame["param_error"].notna().any():
        summary["final_param_error"] = float(frame["param_error"].iloc[-1])
    for s in switch_steps:
        summary[f"recovery_step_after_{s}"] = recovery_step(frame, s)
    if frame["psi_pred"].notna().any():
        nmse = nmse_series(frame)
        summary["final_nmse"] = float(nmse.iloc[-1])
    return summary
