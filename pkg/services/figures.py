from __future__ import annotations
from pathlib import Path
from typing import Optional, Union
import pandas as pd
import numpy as np
import plotly.express as px
from services.transforms import long_loss_table, report_table, smooth_log
from utils.ids import IDS

# ---------- Layout ----------

_MARGIN = dict(l=0, r=0, t=60, b=0)

# eval bars grow with the number of reported metrics
_EVAL_BASE_H     = 360
_EVAL_PER_METRIC = 22
_EVAL_MAX_H      = 1200
_EVAL_TILT_AT    = 8

_MAX_LABELLED_BARS = 40
_DB_DECIMALS = 2

_SMOOTH_WINDOW = 25


def _apply_title(fig, title: str, n: int, unit: str = "N"):
    fig.update_layout(
        title=dict(text=f"{title}<br><sup>{unit} = {n}</sup>", x=0.5, xanchor="center"),
        uniformtext_minsize=10,
    )
    return fig


def _metric_label_template(values, decimals: int = _DB_DECIMALS) -> str:
    """PSNR-scale values (>= 1) get fixed decimals; Chamfer-scale errors keep 3 significant digits."""
    arr = np.abs(np.asarray(values, dtype=float))
    arr = arr[np.isfinite(arr)]
    if arr.size and arr.min() >= 1.0:
        return f"%{{y:.{decimals}f}}"
    return "%{y:.3g}"


def _label_metric_bars(fig):
    total = sum(0 if getattr(tr, "x", None) is None else len(tr.x) for tr in fig.data)
    if total > _MAX_LABELLED_BARS:
        return fig
    for tr in fig.data:
        if getattr(tr, "type", "") == "bar" and getattr(tr, "text", None) is None:
            tr.update(texttemplate=_metric_label_template(tr.y), textposition="outside", cliponaxis=False)
    return fig


def _finalize_figure(fig, title: str, n: int, *, unit: str = "N", margin: Optional[dict] = None):
    fig.update_layout(margin=(margin or _MARGIN))
    return _apply_title(fig, title, n, unit)


# ---------- Loss curves & eval bars ----------

def build_loss_curves(log: pd.DataFrame, smooth: int = _SMOOTH_WINDOW):
    """
    Per-term loss curves over iterations (log-scale y).
      - rolling mean over `smooth` rows; raw total kept as a faint extra trace
      - terms that stay zero are left out
      - empty log -> empty figure
    """
    if log is None or log.empty or IDS.COL_ITERATION not in log.columns:
        return px.scatter()

    smoothed = smooth_log(log, smooth)
    long = long_loss_table(smoothed)
    long = long[long["value"] > 0]
    if long.empty:
        return px.scatter()

    fig = px.line(long, x=IDS.COL_ITERATION, y="value", color="term", log_y=True)
    fig.update_traces(hovertemplate="it %{x}<br>%{y:.4g}<extra></extra>")

    raw = log.sort_values(IDS.COL_ITERATION)
    fig.add_scatter(x=raw[IDS.COL_ITERATION], y=raw[IDS.COL_TOTAL], mode="lines", name="total (raw)",
                    opacity=0.25, line=dict(color="#111827", width=1))
    fig.update_layout(height=480, legend_title_text="term", yaxis_title="loss (unweighted)")

    return _finalize_figure(fig, title=f"Training losses (rolling mean over {smooth})",
                            n=int(log[IDS.COL_ITERATION].max()) + 1, unit="iterations")


def build_eval_bars(report: dict):
    """
    One bar per reported metric, faceted by group (geometry, nvs, materials, relighting).
      - missing metrics (no ground truth) are skipped
      - PSNR-like groups share an axis; geometry keeps its own units
    """
    table = report_table(report).dropna(subset=["value"])
    if table.empty:
        return px.scatter()

    fig = px.bar(table, x="metric", y="value", color="group", facet_col="group", facet_col_wrap=2)
    fig.update_xaxes(matches=None, showticklabels=True)
    fig.update_yaxes(matches=None, rangemode="tozero")
    fig.update_traces(hovertemplate="%{x}<br>%{y:.3f}<extra></extra>", cliponaxis=False)

    n_cats = len(table)
    fig.update_layout(height=min(_EVAL_MAX_H, _EVAL_BASE_H + _EVAL_PER_METRIC * n_cats), showlegend=False)
    if n_cats > _EVAL_TILT_AT:
        fig.update_xaxes(tickangle=-45, automargin=True)

    fig = _label_metric_bars(fig)
    return _finalize_figure(fig, title="Evaluation summary", n=n_cats, unit="metrics")


def write_figure(fig, path: Union[str, Path]) -> Path:
    """Standalone HTML (plotly.js from the CDN)."""
    path = Path(path)
    try:
        fig.write_html(str(path), include_plotlyjs="cdn", full_html=True)
    except OSError as e:
        raise ValueError(f"cannot write figure {path}: {e.strerror or e}")
    return path
