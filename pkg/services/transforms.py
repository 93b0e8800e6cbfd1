from __future__ import annotations
from typing import Any, Dict, Iterable, List, Optional
import numpy as np
import pandas as pd
from utils.ids import IDS

# ---------- Training-log transforms ----------

def loss_drop(log: pd.DataFrame, window: int = 50, column: str = IDS.COL_TOTAL) -> float:
    """
    Relative decrease of `column` between the first and last `window` rows:
    1 - mean(last window) / mean(first window).
    Needs at least one row; windows overlap when the log is short.
    """
    if column not in log.columns:
        raise ValueError(f"loss_drop: column '{column}' not in the training log")
    values = pd.to_numeric(log.sort_values(IDS.COL_ITERATION)[column], errors="coerce").dropna()
    if values.empty:
        raise ValueError("loss_drop: training log has no rows")
    if window < 1:
        raise ValueError(f"loss_drop: window must be >= 1, got {window}")
    first = float(values.iloc[:window].mean())
    last = float(values.iloc[-window:].mean())
    if first <= 0:
        return 0.0
    return 1.0 - last / first


def smooth_log(log: pd.DataFrame, window: int = 25, columns: Optional[Iterable[str]] = None) -> pd.DataFrame:
    """Trailing rolling mean of the numeric loss columns; iteration, lr and kappa untouched."""
    cols = [c for c in (columns or (IDS.TERMS + (IDS.COL_TOTAL,))) if c in log.columns]
    out = log.sort_values(IDS.COL_ITERATION).reset_index(drop=True).copy()
    if window > 1 and cols:
        out[cols] = out[cols].rolling(window, min_periods=1).mean()
    return out


def long_loss_table(log: pd.DataFrame, terms: Optional[List[str]] = None) -> pd.DataFrame:
    """Melt per-term columns into (iteration, term, value) rows; zero-only terms are dropped."""
    terms = [t for t in (terms or list(IDS.TERMS) + [IDS.COL_TOTAL]) if t in log.columns]
    long = log.melt(id_vars=[IDS.COL_ITERATION], value_vars=terms, var_name="term", value_name="value")
    active = long.groupby("term")["value"].transform(lambda s: bool((s.abs() > 0).any()))
    return long[active.astype(bool)].reset_index(drop=True)


# ---------- Evaluation-report transforms ----------

def report_table(report: Dict[str, Any]) -> pd.DataFrame:
    """
    Flatten an evaluation report into (group, metric, value) rows.
    - scalars -> one row, group "geometry"
    - lists (per view) -> their mean, metric suffixed "_mean"
    - dicts (per light / per channel) -> one row per key
    Missing (None) values are kept as NaN.
    """
    rows = []
    for key, value in report.items():
        if key.startswith("_"):
            continue
        if isinstance(value, dict):
            for sub, v in value.items():
                rows.append({"group": key, "metric": str(sub), "value": _num(v)})
        elif isinstance(value, (list, tuple)):
            vals = [v for v in (_num(x) for x in value) if np.isfinite(v)]
            rows.append({"group": key, "metric": f"{key}_mean", "value": float(np.mean(vals)) if vals else np.nan})
        else:
            rows.append({"group": "geometry" if key in ("chamfer", "normal_consistency") else "summary",
                         "metric": key, "value": _num(value)})
    return pd.DataFrame(rows, columns=["group", "metric", "value"])


def _num(value: Any) -> float:
    if value is None:
        return np.nan
    try:
        return float(value)
    except (TypeError, ValueError):
        return np.nan
