"""Multi-realization benchmark: simulate, split, fit, score, aggregate, export."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import (
    factual_rnn_fit,
    factual_rnn_predict,
    gformula_fit,
    gformula_predict,
    gformula_predict_ite_all,
)
from .config import ExperimentConfig
from .data import GROUND_TRUTH_FIELDS, LongitudinalDataset, split
from .io import load_dataset
from .metrics import CSV_COLUMNS, MetricReport, evaluate_predictions, fit_plugin
from .model import predict_outcomes, train
from .persist import FittedModel, model_config_dict
from .simulator import simulate

log = logging.getLogger(__name__)

AGG_METRICS = ("rmse", "pehe", "pehe_root", "if_pehe")
ROW_COLUMNS = CSV_COLUMNS + ("status",)


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)  # MetricReport

    def aggregate(self) -> list[dict]:
        """Mean and sample standard deviation per (model, gamma), in first-seen order."""
        groups: dict[tuple, list] = {}
        for rep in self.rows:
            groups.setdefault((rep.model, rep.gamma), []).append(rep)
        out = []
        for (model, gamma), reps in groups.items():
            agg = {"model": model, "gamma": gamma}
            ok = [r for r in reps if not r.error]
            agg["n"] = len(ok)
            agg["failed"] = len(reps) - len(ok)
            for metric in AGG_METRICS:
                vals = [getattr(r, metric) for r in ok if getattr(r, metric) is not None]
                mean, std = mean_std(vals)
                agg[f"{metric}_mean"] = mean
                agg[f"{metric}_std"] = std
            out.append(agg)
        return out


def mean_std(values) -> tuple[Optional[float], Optional[float]]:
    """Mean and sample (ddof=1) standard deviation; std is nan for one value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return None, None
    mean = float(values.mean())
    std = float(values.std(ddof=1)) if values.size > 1 else math.nan
    return mean, std


def predict_fitted(fitted: FittedModel, ds: LongitudinalDataset) -> dict[str, np.ndarray]:
    """Factual predictions, ITE estimates, and (VTD only) treatment-head output."""
    if fitted.kind == "gformula":
        return {"factual": gformula_predict(fitted.params, ds), "tau": gformula_predict_ite_all(fitted.params, ds)}
    if fitted.kind == "vtd":
        out = predict_outcomes(fitted.params, ds)
        return {"factual": out["factual"], "tau": out["y1"] - out["y0"], "a_hat": out["a_hat"]}
    out = factual_rnn_predict(fitted.params, ds)
    return {"factual": out["factual"], "tau": out["y1"] - out["y0"]}


def fit_model(kind: str, train_data: LongitudinalDataset, val_data: LongitudinalDataset,
              cfg: ExperimentConfig, seed: int) -> FittedModel:
    if kind == "gformula":
        m = gformula_fit(_concat(train_data, val_data), cfg.gformula_window, cfg.gformula_ridge)
        return FittedModel(kind, m, {"window": m.window, "ridge": m.ridge})
    mcfg = cfg.model_config(train_data.n_covariates, train_data.n_confounders)
    if kind == "vtd":
        params, history = train(train_data, val_data, mcfg, seed)
        extra = {"p_treated": train_data.treated_fraction(), "epochs": len(history)}
    else:
        params, history = factual_rnn_fit(train_data, val_data, mcfg, seed)
        extra = {"epochs": len(history)}
    return FittedModel(kind, params, model_config_dict(mcfg), extra)


def fit_and_predict(kind: str, train_data: LongitudinalDataset, val_data: LongitudinalDataset,
                    test_data: LongitudinalDataset, cfg: ExperimentConfig, seed: int):
    """Returns (FittedModel, predictions on ``test_data``)."""
    fitted = fit_model(kind, train_data, val_data, cfg, seed)
    return fitted, predict_fitted(fitted, test_data)


def _concat(a: LongitudinalDataset, b: LongitudinalDataset) -> LongitudinalDataset:
    kw = {}
    for name in ("x", "a", "y", "mask") + GROUND_TRUTH_FIELDS:
        va, vb = getattr(a, name), getattr(b, name)
        kw[name] = None if va is None or vb is None else np.concatenate([va, vb])
    return LongitudinalDataset(ids=list(a.ids) + list(b.ids), **kw)


def run_realization(cfg: ExperimentConfig, gamma: float, seed: int,
                    dataset: Optional[LongitudinalDataset] = None) -> list[MetricReport]:
    ds = dataset if dataset is not None else simulate(cfg.sim_config(gamma, seed))
    train_data, val_data, test_data = split(ds, cfg.split, seed)
    plugin = fit_plugin(test_data, cfg.plugin_window, seed=seed)
    reports = []
    for kind in cfg.models:
        labels = {"model": kind, "seed": seed, "gamma": gamma}
        try:
            _, pred = fit_and_predict(kind, train_data, val_data, test_data, cfg, seed)
            rep = evaluate_predictions(test_data, pred["factual"], pred["tau"], pred.get("a_hat"), plugin, **labels)
        except Exception as err:  # one failed model must not sink the run
            log.warning("model %s failed at gamma=%s seed=%s: %s", kind, gamma, seed, err)
            rep = MetricReport(rmse=math.nan, pehe=None, if_pehe=math.nan, overlap={},
                               error=f"{type(err).__name__}: {err}", **labels)
        reports.append(rep)
    return reports


def run_experiment(cfg: ExperimentConfig) -> ResultsTable:
    table = ResultsTable()
    external = load_dataset(cfg.data_path) if cfg.data_path else None
    gammas = cfg.gammas if external is None else [None]
    for j, gamma in enumerate(gammas):
        for i in range(cfg.realizations):
            seed = cfg.seed_for(j, i)
            log.info("gamma=%s realization=%d seed=%d", gamma, i, seed)
            table.rows.extend(run_realization(cfg, gamma, seed, external))
    return table


# -- export -----------------------------------------------------------------------


def format_cell(v) -> str:
    """CSV text for one value: repr for floats (round-trips exactly), blank for None."""
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROW_COLUMNS)
    for rep in table.rows:
        row = rep.row()
        writer.writerow([format_cell(row[c]) for c in CSV_COLUMNS] + [rep.error or "ok"])
    return buf.getvalue()


AGG_COLUMNS = ("model", "gamma", "n", "failed") + tuple(
    f"{m}_{s}" for m in AGG_METRICS for s in ("mean", "std")
)


def aggregate_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AGG_COLUMNS)
    for agg in table.aggregate():
        writer.writerow([format_cell(agg[c]) for c in AGG_COLUMNS])
    return buf.getvalue()


def _pm(mean, std) -> str:
    if mean is None:
        return "n/a"
    if std is None or math.isnan(std):
        return f"{mean:.2f}"
    return f"{mean:.2f} ± {std:.2f}"


def text_table(table: ResultsTable) -> str:
    aggs = table.aggregate()
    header = ["Model", "gamma", "RMSE", "IF-PEHE", "PEHE"]
    lines = [
        [a["model"], "" if a["gamma"] is None else f"{a['gamma']:g}",
         _pm(a["rmse_mean"], a["rmse_std"]), _pm(a["if_pehe_mean"], a["if_pehe_std"]),
         _pm(a["pehe_mean"], a["pehe_std"])]
        for a in aggs
    ]
    widths = [max(len(str(r[k])) for r in [header] + lines) for k in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), "  ".join("-" * w for w in widths)]
    out.extend(fmt.format(*r) for r in lines)
    return "\n".join(out) + "\n"


def export_report(table: ResultsTable, out_dir) -> dict[str, Path]:
    if not table.rows:
        raise ValueError("export_report: empty results table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "rows": out_dir / "results.csv",
        "aggregate": out_dir / "aggregate.csv",
        "table": out_dir / "table.txt",
    }
    paths["rows"].write_text(rows_csv(table), encoding="utf-8")
    paths["aggregate"].write_text(aggregate_csv(table), encoding="utf-8")
    paths["table"].write_text(text_table(table), encoding="utf-8")
    return paths


def write_manifest(cfg: ExperimentConfig, out_dir) -> Path:
    gammas = [None] if cfg.data_path else cfg.gammas
    seeds = [
        {"gamma": g, "realization": i, "seed": cfg.seed_for(j, i)}
        for j, g in enumerate(gammas)
        for i in range(cfg.realizations)
    ]
    doc = {
        "format": "vtd-run-manifest",
        "code_version": f"vtd {__version__}",
        "config_text": cfg.source_text,
        "models": cfg.models,
        "seeds": seeds,
        "seed_rule": "seed_base + 10000 * gamma_index + realization",
        "outputs": ["results.csv", "aggregate.csv", "table.txt"],
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
