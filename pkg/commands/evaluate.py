# -------------------------------------------------------------------
# Single responsibility: checkpoint + dataset -> EvalReport (JSON, HTML, table)
# -------------------------------------------------------------------

from __future__ import annotations
import logging
from dataclasses import replace

import pandas as pd

from commands.common import (
    eval_config,
    load_config,
    oracle_config,
    path_arg,
    require_dir,
    require_file,
    threads_of,
    writable_dir,
)
from layout import add_config_flag
from services.cameras import load_dataset
from services.figures import build_eval_bars, write_figure
from services.metrics import evaluate
from services.oracle import TrainedScene
from services.trainer import load_trained
from utils.ids import IDS
from utils.jsonloaders import write_json

logger = logging.getLogger("cli")


def run(args) -> int:
    config = load_config(args)
    ckpt = require_file(path_arg(args, config, "checkpoint"), "checkpoint")
    data = require_dir(path_arg(args, config, "data"), "dataset")
    out = writable_dir(path_arg(args, config, "out"), "report")
    cfg = eval_config(config)
    if args.samples is not None:
        cfg = replace(cfg, n_samples=args.samples)

    trained = load_trained(ckpt)
    scene = TrainedScene(trained.fields.geometry, trained.fields.material, trained.fields.light)
    report = evaluate(scene, load_dataset(data), data, cfg, oracle_config(config), threads_of(args, config))
    report.checkpoint = str(ckpt)
    report.iteration = trained.iteration

    body = report.to_dict()
    write_json(out / IDS.EVAL_JSON, body)
    write_figure(build_eval_bars(body), out / IDS.EVAL_HTML)

    table = report.table()
    with pd.option_context("display.max_rows", None, "display.width", 120):
        print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"report written to {out / IDS.EVAL_JSON}")
    return 0


def register(subparsers) -> None:
    sub = subparsers.add_parser("eval", help="geometry, novel-view, material and relighting metrics")
    sub.add_argument("--checkpoint", default=None, help="checkpoint archive (.npz)")
    sub.add_argument("--data", default=None, help="dataset directory with ground truth")
    sub.add_argument("--out", default=None, help="directory for eval_report.json and eval.html")
    sub.add_argument("--samples", type=int, default=None, help="surface samples per mesh (overrides eval.n_samples)")
    add_config_flag(sub)
    sub.set_defaults(handler=run)
