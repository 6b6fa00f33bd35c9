"""Command-line entry point: ``vtd simulate|train|evaluate|benchmark|gradcheck``.

Failures print one JSON line ``{"error": ..., "type": ..., "command": ...}``
to stderr and exit with status 1.  ``VTD_LOG_LEVEL`` (DEBUG, INFO, WARNING,
...) sets log verbosity; the default is WARNING.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import gradcheck
from .config import MODELS, load_config
from .data import split
from .experiment import (
    export_report,
    format_cell,
    fit_model,
    predict_fitted,
    run_experiment,
    write_manifest,
)
from .io import load_dataset, save_dataset
from .metrics import CSV_COLUMNS, evaluate_predictions, fit_plugin
from .persist import load_model, save_model
from .simulator import simulate

log = logging.getLogger("vtd")


def _setup_logging() -> None:
    level = os.environ.get("VTD_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def cmd_simulate(args) -> dict:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for j, gamma in enumerate(cfg.gammas):
        for i in range(cfg.realizations):
            seed = cfg.seed_for(j, i)
            path = out / f"sim_gamma{gamma:g}_seed{seed}.jsonl"
            save_dataset(simulate(cfg.sim_config(gamma, seed)), path)
            written.append(str(path))
    return {"datasets": written}


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    seed = cfg.seed_base
    train_data, val_data, _ = split(ds, cfg.split, seed)
    fitted = fit_model(args.model, train_data, val_data, cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.model}.vtd.json"
    save_model(path, fitted)
    return {"model_file": str(path)}


def cmd_evaluate(args) -> dict:
    fitted = load_model(args.model_file)
    ds = load_dataset(args.data)
    pred = predict_fitted(fitted, ds)
    plugin = fit_plugin(ds)
    rep = evaluate_predictions(ds, pred["factual"], pred["tau"], pred.get("a_hat"), plugin,
                               model=fitted.kind, seed=None, gamma=None)
    row = rep.row()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerow([format_cell(row[c]) for c in CSV_COLUMNS])
    return {"csv": str(out), "rmse": rep.rmse, "if_pehe": rep.if_pehe, "pehe": rep.pehe}


def cmd_benchmark(args) -> dict:
    cfg = load_config(args.config)
    table = run_experiment(cfg)
    paths = export_report(table, args.out)
    manifest = write_manifest(cfg, args.out)
    sys.stdout.write(Path(paths["table"]).read_text(encoding="utf-8"))
    failed = sum(1 for r in table.rows if r.error)
    return {"outputs": [str(p) for p in paths.values()] + [str(manifest)], "failed_rows": failed}


def cmd_gradcheck(args) -> dict:
    res = gradcheck.run(n_cases=args.cases, seed=args.seed)
    for name, err in res["primitives"].items():
        print(f"{name:10s} {err:.3e}")
    print(f"{'vtd_loss':10s} {res['vtd_objective']:.3e}")
    print(f"elapsed {res['seconds']:.1f}s")
    if not (res["primitives_ok"] and res["vtd_ok"]):
        raise RuntimeError(
            f"gradient check failed (primitive tol {gradcheck.PRIMITIVE_TOL:g}, model tol {gradcheck.MODEL_TOL:g})"
        )
    return {"ok": True}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtd", description="Variational temporal deconfounder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write synthetic datasets for every gamma and realization")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit one model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=MODELS)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a saved model on a dataset file")
    p.add_argument("--model-file", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="run the multi-realization benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except Exception as err:
        log.debug("command failed", exc_info=True)
        line = {"error": str(err), "type": type(err).__name__, "command": args.command}
        print(json.dumps(line), file=sys.stderr)
        return 1
    log.info("%s finished: %s", args.command, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
