"""Comparison estimators: windowed ridge g-formula and an unadjusted factual RNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import LongitudinalDataset
from .metrics import ridge_fit, rmse, window_features
from .model import LossBreakdown, ModelConfig, _batch_major, _time_major, encode_states, supervised_loss
from .seqnets import LstmParams, init_lstm, init_stack, stack_forward
from .training import fit

# -- g-formula -------------------------------------------------------------------


@dataclass
class GFormulaModel:
    """Pooled ridge regression of y_t on [x_{t-k+1..t}, a_{t-k+1..t}]."""

    window: int
    coef: np.ndarray
    intercept: float
    ridge: float

    @property
    def treatment_coef(self) -> float:
        return float(self.coef[-1])


def gformula_features(ds: LongitudinalDataset, window: int) -> np.ndarray:
    """x_{t-k+1..t}, a_{t-k+1..t-1}, then a_t as the last column."""
    feats = window_features(ds, window, include_current_a=True)
    # window_features carries a_{t-k} as its oldest treatment lag; drop it to match
    # the model's window of k treatments ending at a_t.
    p = ds.n_covariates
    a_lag_cols = list(range(window * p, window * p + window))
    drop = a_lag_cols[-1]
    return np.delete(feats, drop, axis=-1)


def _complete_windows(ds: LongitudinalDataset, window: int) -> np.ndarray:
    """Steps whose whole window is observed (mask true for t-k+1..t)."""
    n, t_max = ds.mask.shape
    ok = np.zeros((n, t_max), dtype=bool)
    for t in range(window - 1, t_max):
        ok[:, t] = ds.mask[:, t - window + 1 : t + 1].all(axis=1)
    return ok


def gformula_fit(ds: LongitudinalDataset, window: int = 3, ridge: float = 1.0) -> GFormulaModel:
    if window < 1:
        raise ValueError("window must be >= 1")
    feats = gformula_features(ds, window)
    ok = _complete_windows(ds, window)
    if ok.sum() <= feats.shape[-1]:
        raise ValueError(f"only {int(ok.sum())} complete windows for {feats.shape[-1]} features")
    coef, intercept = ridge_fit(feats[ok], ds.y[ok], ridge)
    return GFormulaModel(window, coef, intercept, ridge)


def gformula_objective(model: GFormulaModel, ds: LongitudinalDataset, coef=None, intercept=None) -> float:
    """Ridge training objective: sum of squared residuals plus ridge * ||coef||^2."""
    coef = model.coef if coef is None else coef
    intercept = model.intercept if intercept is None else intercept
    ok = _complete_windows(ds, model.window)
    resid = gformula_features(ds, model.window)[ok] @ coef + intercept - ds.y[ok]
    return float(resid @ resid + model.ridge * coef @ coef)


def gformula_predict(model: GFormulaModel, ds: LongitudinalDataset, a_current=None) -> np.ndarray:
    """Predicted outcomes (N, T); ``a_current`` overrides the treatment at each step."""
    feats = gformula_features(ds, model.window)
    if a_current is not None:
        feats = feats.copy()
        feats[..., -1] = a_current
    return feats @ model.coef + model.intercept


def gformula_predict_ite_all(model: GFormulaModel, ds: LongitudinalDataset) -> np.ndarray:
    return gformula_predict(model, ds, 1.0) - gformula_predict(model, ds, 0.0)


def gformula_predict_ite(model: GFormulaModel, ds: LongitudinalDataset, patient: int, t: int) -> float:
    if t < model.window - 1 or not ds.mask[patient, t - model.window + 1 : t + 1].all():
        raise ValueError(f"incomplete window at step {t} for patient {patient}")
    one = ds.subset([patient])
    return float(gformula_predict_ite_all(model, one)[0, t])


# -- factual RNN -----------------------------------------------------------------


@dataclass
class FactualRnnParams:
    rnn: LstmParams
    outc: list  # head on [h_t, a_t]


def init_factual_rnn(cfg: ModelConfig, rng: np.random.Generator) -> FactualRnnParams:
    hid = cfg.hidden_size
    return FactualRnnParams(
        rnn=init_lstm(cfg.p + 1, hid, rng),
        outc=init_stack([hid + 1, cfg.head_width, 1], rng),
    )


def _states(params: FactualRnnParams, x, a, mask) -> dc.Var:
    return dc.concat(encode_states(params, x, a, mask)[1:], axis=0)


def _head(params: FactualRnnParams, h: dc.Var, a_flat) -> dc.Var:
    a_col = np.broadcast_to(np.asarray(a_flat, dtype=np.float64), (h.shape[0],)).reshape(-1, 1)
    return stack_forward(params.outc, dc.concat([h, a_col], axis=-1))[:, 0]


def factual_rnn_predict(params: FactualRnnParams, ds: LongitudinalDataset) -> dict[str, np.ndarray]:
    n = len(ds)
    h = _states(params, ds.x, ds.a, ds.mask)
    a_flat = _time_major(ds.a).astype(np.float64)
    return {
        "factual": _batch_major(_head(params, h, a_flat).value, n),
        "y0": _batch_major(_head(params, h, 0.0).value, n),
        "y1": _batch_major(_head(params, h, 1.0).value, n),
    }


def factual_rnn_predict_ite_all(params: FactualRnnParams, ds: LongitudinalDataset) -> np.ndarray:
    pred = factual_rnn_predict(params, ds)
    return pred["y1"] - pred["y0"]


def factual_rnn_predict_ite(params: FactualRnnParams, ds: LongitudinalDataset, patient: int, t: int) -> float:
    if not ds.mask[patient, t]:
        raise ValueError(f"step {t} of patient {patient} is masked")
    return float(factual_rnn_predict_ite_all(params, ds.subset([patient]))[0, t])


def factual_rnn_fit(train_data: LongitudinalDataset, val_data: LongitudinalDataset, cfg: ModelConfig,
                    rng: np.random.Generator | int):
    """Plain regression of factual outcomes; no latent block, unit weights, alpha = 0."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    params = init_factual_rnn(cfg, rng)

    def objective(traced, idx, epoch, rng_):
        x, a, y, mask = train_data.x[idx], train_data.a[idx], train_data.y[idx], train_data.mask[idx]
        h = _states(traced, x, a, mask)
        a_flat = _time_major(a).astype(np.float64)
        m = _time_major(mask)
        l_s = supervised_loss(np.ones(len(a_flat)), _head(traced, h, a_flat), _time_major(y), m, cfg.loss_form)
        return l_s, LossBreakdown.build(float(l_s.value), 0.0, 0.0, 0.0)

    def validate(p):
        return rmse(factual_rnn_predict(p, val_data)["factual"], val_data.y, val_data.mask)

    return fit(params, objective, len(train_data), cfg, rng, validate)
