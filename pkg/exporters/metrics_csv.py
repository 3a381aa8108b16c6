from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd


FLAG_COLUMNS = ("switch", "relocation", "deadlock_override", "policy_update", "uncertified", "explore")


def metrics_frame(rows: Sequence[Dict[str, Any]], columns: Sequence[str] = ()) -> pd.DataFrame:
    """One row per step; an empty run keeps the given header."""
    if not rows:
        return pd.DataFrame(columns=list(columns))
    frame = pd.DataFrame(list(rows))
    if columns:
        frame = frame.reindex(columns=list(columns))
    return frame


def write_metrics(rows: Union[Sequence[Dict[str, Any]], pd.DataFrame], path: Union[str, Path], columns: Sequence[str] = ()) -> Path:
    """
    Fixed header, 17 significant digits, '.' decimal separator whatever the
    locale; undefined values are written as blanks.
    """
    frame = rows if isinstance(rows, pd.DataFrame) else metrics_frame(rows, columns)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g", na_rep="", lineterminator="\n")
    return out


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    for col in FLAG_COLUMNS:
        if col in frame.columns and frame[col].dtype != bool:
            frame[col] = frame[col].map(lambda v: str(v).strip().lower() == "true")
    return frame


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return None if math.isnan(f) or math.isinf(f) else f
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_summary(summary: Dict[str, Any], path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def summary_rows(summary: Dict[str, Any], prefix: str = "") -> List[Dict[str, Any]]:
    """Flattens nested summary records into (key, value) rows."""
    rows: List[Dict[str, Any]] = []
    for key, value in summary.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(summary_rows(value, prefix=f"{name}."))
        elif isinstance(value, (list, tuple)):
            rows.append({"key": name, "value": json.dumps(_jsonable(value))})
        else:
            rows.append({"key": name, "value": _jsonable(value)})
    return rows
