import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtd.baselines import gformula_fit, init_factual_rnn
from vtd.config import ConfigError, load_config, loads_config, parse_value
from vtd.data import GROUND_TRUTH_FIELDS, LongitudinalDataset
from vtd.experiment import (
    ROW_COLUMNS,
    ResultsTable,
    aggregate_csv,
    export_report,
    fit_and_predict,
    mean_std,
    predict_fitted,
    rows_csv,
    run_experiment,
    text_table,
    write_manifest,
)
from vtd.io import DatasetFormatError, fmt_float, load_dataset, loads_dataset, save_arrays, save_dataset, load_arrays
from vtd.metrics import CSV_COLUMNS, MetricReport
from vtd.model import ModelConfig, init_vtd
from vtd.params import named_arrays
from vtd.persist import FittedModel, load_model, model_config, model_config_dict, save_model
from vtd.simulator import SimConfig, simulate

# Tiny panels are nearly separable, so the clip-boundary notice is expected here.
pytestmark = pytest.mark.filterwarnings("ignore:IF-PEHE:RuntimeWarning")

TINY = """
sim.n_patients = 60
sim.n_steps = 4
sim.n_covariates = 4
sim.n_confounders = 2
model.hidden_size = 6
model.max_epochs = 2
experiment.models = vtd, factual_rnn, gformula
experiment.gammas = 0, 0.6
experiment.realizations = 2
experiment.seed_base = 7
"""


# -- dataset files ---------------------------------------------------------------


def test_dataset_round_trip_bitwise(tmp_path):
    ds = simulate(SimConfig.desk(seed=3))
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    for name in ("x", "a", "y", "mask") + GROUND_TRUTH_FIELDS:
        assert np.array_equal(getattr(ds, name), getattr(back, name)), name
    assert back.ids == ds.ids
    assert back.meta["intercept"] == ds.meta["intercept"]


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_text_round_trips(v):
    assert float(fmt_float(v)) == v


def _tiny_text(drop_field=None, line=3):
    ds = LongitudinalDataset(x=np.arange(12.0).reshape(3, 2, 2), a=[[0, 1], [1, 1], [0, 0]], y=np.zeros((3, 2)))
    header = {"record": "header", "n_patients": 3, "n_steps": 2, "n_covariates": 2, "fields": ["id", "x", "a", "y"]}
    lines = [json.dumps(header)]
    for i in range(len(ds)):
        rec = {"id": ds.ids[i], "x": ds.x[i].tolist(), "a": ds.a[i].tolist(), "y": ds.y[i].tolist()}
        lines.append(json.dumps(rec))
    if drop_field:
        rec = json.loads(lines[line - 1])
        del rec[drop_field]
        lines[line - 1] = json.dumps(rec)
    return "\n".join(lines) + "\n"


def test_missing_field_reports_line():
    with pytest.raises(DatasetFormatError, match="line 3") as err:
        loads_dataset(_tiny_text(drop_field="a", line=3))
    assert err.value.line == 3
    assert "'a'" in str(err.value)


def test_bad_shapes_and_values_reported():
    text = _tiny_text()
    lines = text.splitlines()
    rec = json.loads(lines[1])
    rec["x"] = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
    bad = "\n".join([lines[0], json.dumps(rec)] + lines[2:])
    with pytest.raises(DatasetFormatError, match="line 2: field 'x'"):
        loads_dataset(bad)
    rec = json.loads(lines[2])
    rec["a"] = [0, 2]
    bad = "\n".join(lines[:2] + [json.dumps(rec)] + lines[3:])
    with pytest.raises(DatasetFormatError, match="line 3"):
        loads_dataset(bad)
    with pytest.raises(DatasetFormatError, match="declares 3 patients"):
        loads_dataset("\n".join(lines[:3]))
    with pytest.raises(DatasetFormatError, match="line 1"):
        loads_dataset("\n".join(lines[1:]))


def test_missing_ground_truth_disables_pehe():
    ds = loads_dataset(_tiny_text())
    assert not ds.has_counterfactuals and ds.tau_true is None
    assert ds.mask.all()


# -- configs ---------------------------------------------------------------------


def test_parse_values():
    assert parse_value("3") == 3
    assert parse_value("0.5") == 0.5
    assert parse_value("true") is True
    assert parse_value("none") is None
    assert parse_value("vtd, gformula") == ["vtd", "gformula"]
    assert parse_value("0, 0.6") == [0, 0.6]
    assert parse_value("arm_selected") == "arm_selected"


def test_config_parsing():
    cfg = loads_config(TINY)
    assert cfg.gammas == [0.0, 0.6]
    assert cfg.models == ["vtd", "factual_rnn", "gformula"]
    assert cfg.seed_for(1, 1) == 7 + 10000 + 1
    assert cfg.sim_config(0.6, 5).n_patients == 60
    assert cfg.model_config(4, 2).hidden_size == 6


@pytest.mark.parametrize("text", [
    "sim.n_patients",
    "nosection = 3",
    "bogus.key = 1",
    "experiment.models = vtd, lasso",
    "sim.n_pateints = 5",
    "model.depth = 2",
    "experiment.realizations = 0",
    "data.path = /does/not/exist.jsonl",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        loads_config(text)


def test_relative_data_path(tmp_path):
    ds = simulate(SimConfig.desk(n_patients=30, seed=1))
    (tmp_path / "data").mkdir()
    save_dataset(ds, tmp_path / "data" / "d.jsonl")
    (tmp_path / "run.cfg").write_text("data.path = data/d.jsonl\n")
    cfg = load_config(tmp_path / "run.cfg")
    assert load_dataset(cfg.data_path).ids == ds.ids


# -- persistence -----------------------------------------------------------------


@pytest.mark.parametrize("kind", ["vtd", "factual_rnn"])
def test_neural_model_round_trip(tmp_path, kind):
    cfg = ModelConfig(p=4, r=2, hidden_size=5)
    init = init_vtd if kind == "vtd" else init_factual_rnn
    fitted = FittedModel(kind, init(cfg, np.random.default_rng(0)), model_config_dict(cfg), {"epochs": 3})
    save_model(tmp_path / "m.vtd.json", fitted)
    back = load_model(tmp_path / "m.vtd.json")
    a, b = named_arrays(fitted.params), named_arrays(back.params)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert model_config(back) == cfg
    assert back.extra == {"epochs": 3}


def test_gformula_round_trip(tmp_path):
    m = gformula_fit(simulate(SimConfig.desk(n_patients=50, seed=2)))
    save_model(tmp_path / "g.json", FittedModel("gformula", m, {}))
    back = load_model(tmp_path / "g.json").params
    assert np.array_equal(back.coef, m.coef) and back.intercept == m.intercept and back.window == m.window


def test_array_manifest_rejects_bad_files(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "x.json")
    save_arrays(tmp_path / "y.json", "mystery", {"w": np.ones(2)}, {})
    with pytest.raises(ValueError):
        load_model(tmp_path / "y.json")


# -- benchmark -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_table():
    return run_experiment(loads_config(TINY))


def test_row_count_and_labels(tiny_table):
    assert len(tiny_table.rows) == 2 * 3 * 2
    assert {(r.gamma, r.seed) for r in tiny_table.rows} == {(0.0, 7), (0.0, 8), (0.6, 10007), (0.6, 10008)}
    assert all(not r.error for r in tiny_table.rows)
    assert len(tiny_table.aggregate()) == 3 * 2


def test_aggregate_recomputable(tiny_table):
    for agg in tiny_table.aggregate():
        vals = [r.rmse for r in tiny_table.rows if r.model == agg["model"] and r.gamma == agg["gamma"]]
        assert abs(agg["rmse_mean"] - np.mean(vals)) <= 1e-12
        assert abs(agg["rmse_std"] - np.std(vals, ddof=1)) <= 1e-12


def test_mean_std_sample_deviation():
    mean, std = mean_std([9.0, 11.0])
    assert mean == 10.0
    assert abs(std - math.sqrt(2.0)) <= 1e-12
    assert math.isnan(mean_std([3.0])[1])
    assert mean_std([]) == (None, None)


def test_csv_layout(tiny_table):
    lines = rows_csv(tiny_table).splitlines()
    assert tuple(lines[0].split(",")) == ROW_COLUMNS
    assert ROW_COLUMNS[: len(CSV_COLUMNS)] == CSV_COLUMNS
    assert len(lines) == 1 + len(tiny_table.rows)
    assert all(line.endswith(",ok") for line in lines[1:])
    assert aggregate_csv(tiny_table).splitlines()[0].startswith("model,gamma,n,failed,rmse_mean")


def test_text_table_format():
    table = ResultsTable([MetricReport(rmse=2.4567, pehe=9.0, if_pehe=9.9, overlap={}, model="vtd", seed=s,
                                       gamma=0.6) for s in range(1)])
    table.rows.append(MetricReport(rmse=2.4633, pehe=11.0, if_pehe=9.7, overlap={}, model="vtd", seed=1, gamma=0.6))
    lines = text_table(table).splitlines()
    assert len(lines) == 3  # header, rule, one data line
    assert "Model" in lines[0] and "RMSE" in lines[0] and "IF-PEHE" in lines[0]
    assert "2.46 ± 0.00" in lines[2]
    assert "10.00 ± 1.41" in lines[2]


def test_failed_model_is_flagged(monkeypatch):
    import vtd.experiment as ex

    def boom(*args, **kwargs):
        raise RuntimeError("diverged")

    monkeypatch.setattr(ex, "factual_rnn_fit", boom)
    cfg = loads_config(TINY + "experiment.realizations = 1\nexperiment.gammas = 0.6\n")
    table = run_experiment(cfg)
    status = {r.model: r.error for r in table.rows}
    assert status["factual_rnn"] == "RuntimeError: diverged"
    assert status["vtd"] == "" and status["gformula"] == ""
    text = rows_csv(table)
    assert "RuntimeError: diverged" in text
    agg = {a["model"]: a for a in table.aggregate()}
    assert agg["factual_rnn"]["failed"] == 1 and agg["factual_rnn"]["rmse_mean"] is None


def test_export_and_manifest(tmp_path, tiny_table):
    cfg = loads_config(TINY)
    paths = export_report(tiny_table, tmp_path)
    assert all(p.exists() for p in paths.values())
    manifest = write_manifest(cfg, tmp_path)
    doc = json.loads(manifest.read_text())
    assert doc["config_text"] == TINY
    assert [s["seed"] for s in doc["seeds"]] == [7, 8, 10007, 10008]
    with pytest.raises(ValueError):
        export_report(ResultsTable(), tmp_path)


def test_manifest_reproduces_run(tmp_path, tiny_table):
    write_manifest(loads_config(TINY), tmp_path)
    again = run_experiment(load_config(tmp_path / "manifest.json"))
    assert rows_csv(again) == rows_csv(tiny_table)


def test_external_dataset_run(tmp_path):
    ds = simulate(SimConfig.desk(n_patients=60, n_steps=4, n_covariates=4, n_confounders=2, seed=9))
    save_dataset(ds, tmp_path / "d.jsonl")
    cfg = loads_config(f"data.path = {tmp_path / 'd.jsonl'}\nexperiment.models = gformula\n")
    table = run_experiment(cfg)
    assert len(table.rows) == 1 and table.rows[0].gamma is None and table.rows[0].pehe is not None


def test_predict_fitted_dispatch():
    ds = simulate(SimConfig.desk(n_patients=60, n_steps=4, n_covariates=4, n_confounders=2, seed=4))
    cfg = loads_config(TINY)
    for kind in ("vtd", "factual_rnn", "gformula"):
        fitted, pred = fit_and_predict(kind, ds, ds, ds, cfg, 0)
        again = predict_fitted(fitted, ds)
        assert np.array_equal(pred["tau"], again["tau"])
        assert ("a_hat" in pred) == (kind == "vtd")
