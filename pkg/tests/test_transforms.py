import numpy as np
import pandas as pd
import pytest

from services.figures import build_eval_bars, build_loss_curves, write_figure
from services.transforms import long_loss_table, loss_drop, report_table, smooth_log
from utils.ids import IDS


def _log(n=10):
    rows = []
    for it in range(n):
        row = {c: 0.0 for c in IDS.LOG_COLUMNS}
        row.update({IDS.COL_ITERATION: it, IDS.TERM_L1: 1.0 / (it + 1), IDS.TERM_EIKONAL: 0.5,
                    IDS.COL_LR: 1e-3, IDS.COL_KAPPA: 20.0})
        row[IDS.COL_TOTAL] = row[IDS.TERM_L1] + 0.1 * row[IDS.TERM_EIKONAL]
        rows.append(row)
    return pd.DataFrame(rows, columns=list(IDS.LOG_COLUMNS))


# ---------- training log ----------

def test_loss_drop_between_windows():
    log = _log()
    first = log[IDS.COL_TOTAL].iloc[:2].mean()
    last = log[IDS.COL_TOTAL].iloc[-2:].mean()
    assert loss_drop(log, window=2) == pytest.approx(1 - last / first)
    assert loss_drop(log.iloc[:1], window=50) == 0.0


def test_loss_drop_checks():
    with pytest.raises(ValueError, match="column 'lpips'"):
        loss_drop(_log(), column="lpips")
    with pytest.raises(ValueError, match="no rows"):
        loss_drop(_log().iloc[:0])
    with pytest.raises(ValueError, match="window"):
        loss_drop(_log(), window=0)


def test_smoothing_leaves_schedule_columns_alone():
    log = _log().sample(frac=1.0, random_state=0)
    smooth = smooth_log(log, window=3)
    assert smooth[IDS.COL_ITERATION].tolist() == list(range(10))
    assert smooth[IDS.TERM_L1].iloc[2] == pytest.approx((1 + 1 / 2 + 1 / 3) / 3)
    assert (smooth[IDS.COL_LR] == 1e-3).all()


def test_long_table_drops_silent_terms():
    long = long_loss_table(_log())
    assert set(long["term"]) == {IDS.TERM_L1, IDS.TERM_EIKONAL, IDS.COL_TOTAL}
    assert len(long) == 30


# ---------- evaluation report ----------

def test_report_table_flattens_groups():
    report = {"chamfer": 0.01, "normal_consistency": 3.5, "nvs_psnr": [20.0, 30.0, None],
              "relight_psnr": {"studio": 25.0}, "material_psnr": None, "_private": 1}
    table = report_table(report)
    rows = {(g, m): v for g, m, v in table.itertuples(index=False)}
    assert rows[("geometry", "chamfer")] == 0.01
    assert rows[("nvs_psnr", "nvs_psnr_mean")] == 25.0
    assert rows[("relight_psnr", "studio")] == 25.0
    assert np.isnan(rows[("summary", "material_psnr")])
    assert not any(m == "_private" for _, m in rows)


# ---------- figures ----------

def test_loss_curves_figure(tmp_path):
    fig = build_loss_curves(_log(), smooth=3)
    names = {trace.name for trace in fig.data}
    assert {IDS.TERM_L1, IDS.TERM_EIKONAL, "total (raw)"} <= names
    assert fig.layout.yaxis.type == "log"
    path = write_figure(fig, tmp_path / IDS.LOSS_CURVES_HTML)
    assert "plotly" in path.read_text()


def test_empty_inputs_give_empty_figures():
    assert len(build_loss_curves(pd.DataFrame()).data) == 0
    assert len(build_eval_bars({"chamfer": None}).data) == 0


def test_eval_bars_label_each_metric():
    fig = build_eval_bars({"chamfer": 0.02, "nvs_psnr": [21.0, 23.0], "relight_psnr": {"studio": 24.0}})
    bars = [trace for trace in fig.data if trace.type == "bar"]
    assert sum(len(trace.x) for trace in bars) == 3
    assert "Evaluation summary" in fig.layout.title.text


def test_eval_bar_labels_follow_the_metric_scale():
    fig = build_eval_bars({"chamfer": 0.0042, "nvs_psnr": [21.0, 23.5]})
    templates = {trace.texttemplate for trace in fig.data if trace.type == "bar"}
    assert templates == {"%{y:.3g}", "%{y:.2f}"}
