"""Evaluation metrics: factual RMSE, PEHE, influence-function PEHE, overlap.

IF-PEHE follows the one-step (von Mises) construction: a plug-in effect
estimate ``T_tilde = m1 - m0`` is fit on held-out folds, the plug-in PEHE is
``mean((T_tilde - tau_hat)^2)`` and the first-order correction adds

    2 * (T_tilde - tau_hat) * (a / pi * (y - m1) - (1 - a) / (1 - pi) * (y - m0))

averaged over the scored points, which is the influence function of the PEHE
functional at the plug-in distribution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import LongitudinalDataset

CSV_COLUMNS = (
    "model",
    "seed",
    "gamma",
    "rmse",
    "pehe",
    "pehe_root",
    "if_pehe",
    "overlap_min",
    "overlap_max",
    "outside_frac",
)
IF_PROPENSITY_CLIP = (0.01, 0.99)


def rmse(y_hat, y, mask=None) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("rmse: empty mask")
    resid = (y_hat - y)[mask]
    return float(np.sqrt(np.mean(resid * resid)))


def pehe(tau_hat, tau_true, mask=None) -> float:
    """Mean squared error between estimated and true effects (no root)."""
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    tau_true = np.asarray(tau_true, dtype=np.float64)
    if tau_hat.shape != tau_true.shape:
        raise ValueError(f"pehe: shapes {tau_hat.shape} and {tau_true.shape} differ")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        tau_hat, tau_true = tau_hat[mask], tau_true[mask]
    if tau_hat.size == 0:
        raise ValueError("pehe: empty input")
    d = tau_true - tau_hat
    return float(np.mean(d * d))


def overlap_diag(a_hat, bounds=(0.05, 0.95)) -> dict:
    a_hat = np.asarray(a_hat, dtype=np.float64).ravel()
    if np.any((a_hat <= 0) | (a_hat >= 1)):
        raise ValueError("overlap_diag: propensities must lie in (0, 1)")
    lo, hi = bounds
    return {
        "min": float(a_hat.min()),
        "max": float(a_hat.max()),
        "deciles": np.quantile(a_hat, np.linspace(0.0, 1.0, 11)).tolist(),
        "outside_frac": float(np.mean((a_hat < lo) | (a_hat > hi))),
    }


# -- plug-in learners -------------------------------------------------------------


def window_features(ds: LongitudinalDataset, k: int, include_current_a: bool = False) -> np.ndarray:
    """Per patient-step features from the last ``k`` steps of history.

    Columns: x_{t-k+1..t} (zero-padded before the start), a_{t-k..t-1}, and
    a_t when ``include_current_a``.  No intercept column.  Shape
    (N, T, k*p + k [+1]).
    """
    n, t_max, p = ds.x.shape
    x = np.where(ds.mask[..., None], ds.x, 0.0)
    a = np.where(ds.mask, ds.a, 0).astype(np.float64)
    xpad = np.concatenate([np.zeros((n, k - 1, p)), x], axis=1)
    apad = np.concatenate([np.zeros((n, k)), a], axis=1)
    cols = []
    for lag in range(k):
        cols.append(xpad[:, k - 1 - lag : k - 1 - lag + t_max])
    for lag in range(1, k + 1):
        cols.append(apad[:, k - lag : k - lag + t_max, None])
    if include_current_a:
        cols.append(a[..., None])
    return np.concatenate(cols, axis=-1)


def ridge_fit(features: np.ndarray, target: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    """Ridge regression with an unpenalized intercept (closed form via centering)."""
    x_mean = features.mean(axis=0)
    y_mean = target.mean()
    xc = features - x_mean
    gram = xc.T @ xc + ridge * np.eye(features.shape[1])
    try:
        coef = np.linalg.solve(gram, xc.T @ (target - y_mean))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("ridge system is singular; use a positive ridge strength") from None
    if not np.all(np.isfinite(coef)):
        raise np.linalg.LinAlgError("ridge system is singular; use a positive ridge strength")
    return coef, float(y_mean - x_mean @ coef)


def logistic_irls(features: np.ndarray, target: np.ndarray, tol: float = 1e-8, max_iter: int = 100,
                  ridge: float = 1e-6) -> np.ndarray:
    """Logistic regression by iteratively reweighted least squares; intercept is column 0."""
    design = np.column_stack([np.ones(len(features)), features])
    beta = np.zeros(design.shape[1])
    penalty = ridge * np.eye(design.shape[1])
    penalty[0, 0] = 0.0
    for _ in range(max_iter):
        eta = design @ beta
        prob = 0.5 * (1.0 + np.tanh(0.5 * eta))
        w = np.clip(prob * (1.0 - prob), 1e-10, None)
        grad = design.T @ (target - prob) - penalty @ beta
        hess = design.T @ (design * w[:, None]) + penalty
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


@dataclass
class PluginModels:
    """Cross-fitted nuisance predictions for every patient-step of the scored data."""

    window: int
    propensity: np.ndarray  # (N, T), clipped
    mu0: np.ndarray  # (N, T)
    mu1: np.ndarray  # (N, T)
    folds: np.ndarray  # fold id per patient
    coefs: list = field(default_factory=list, repr=False)

    @property
    def tau_plugin(self) -> np.ndarray:
        return self.mu1 - self.mu0


def fit_plugin(ds: LongitudinalDataset, window: int = 3, n_folds: int = 2, seed: int = 0,
               ridge: float = 1.0) -> PluginModels:
    """Fit logistic propensity and per-arm ridge outcome models with cross-fitting.

    Each patient's nuisance values come from models fit on the other fold(s).
    """
    m = ds.mask
    a_obs = ds.a[m]
    if a_obs.min() == a_obs.max():
        raise ValueError("fit_plugin: data contain a single treatment arm")
    feats = window_features(ds, window)
    n = len(ds)
    folds = np.random.default_rng(seed).permutation(n) % n_folds
    prop = np.full(ds.a.shape, 0.5)
    mu0 = np.zeros(ds.a.shape)
    mu1 = np.zeros(ds.a.shape)
    coefs = []
    for k in range(n_folds):
        fit_idx = folds != k
        score_idx = folds == k
        fm = m & fit_idx[:, None]
        f_fit, a_fit, y_fit = feats[fm], ds.a[fm].astype(np.float64), ds.y[fm]
        if a_fit.min() == a_fit.max():
            raise ValueError("fit_plugin: a training fold contains a single treatment arm")
        # Standardize for IRLS conditioning; statistics from the fitting fold only.
        loc, sc = f_fit.mean(axis=0), f_fit.std(axis=0)
        sc = np.where(sc > 0, sc, 1.0)
        beta = logistic_irls((f_fit - loc) / sc, a_fit)
        c0, i0 = ridge_fit(f_fit[a_fit == 0], y_fit[a_fit == 0], ridge)
        c1, i1 = ridge_fit(f_fit[a_fit == 1], y_fit[a_fit == 1], ridge)
        coefs.append({"propensity": beta, "loc": loc, "scale": sc, "mu0": (c0, i0), "mu1": (c1, i1)})

        f_score = feats[score_idx]
        eta = beta[0] + ((f_score - loc) / sc) @ beta[1:]
        prop[score_idx] = 0.5 * (1.0 + np.tanh(0.5 * eta))
        mu0[score_idx] = f_score @ c0 + i0
        mu1[score_idx] = f_score @ c1 + i1
    prop = np.clip(prop, *IF_PROPENSITY_CLIP)
    return PluginModels(window, prop, mu0, mu1, folds, coefs)


def if_pehe(ds: LongitudinalDataset, tau_hat, plugin: PluginModels, correction: bool = True,
            return_parts: bool = False):
    """Influence-function corrected PEHE estimate from observed (a, y) only."""
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    m = ds.mask
    a = ds.a[m].astype(np.float64)
    y = ds.y[m]
    pi = plugin.propensity[m]
    mu0, mu1 = plugin.mu0[m], plugin.mu1[m]
    diff = (mu1 - mu0) - tau_hat[m]
    plug = float(np.mean(diff * diff))
    lo, hi = IF_PROPENSITY_CLIP
    at_bound = np.mean((pi <= lo) | (pi >= hi))
    if at_bound > 0.05:
        warnings.warn(
            f"IF-PEHE: {at_bound:.1%} of propensities at the clip boundary; correction may be unstable",
            RuntimeWarning,
            stacklevel=2,
        )
    corr = 0.0
    if correction:
        resid = a / pi * (y - mu1) - (1.0 - a) / (1.0 - pi) * (y - mu0)
        corr = float(np.mean(2.0 * diff * resid))
    value = plug + corr
    if return_parts:
        return value, plug, corr
    return value


@dataclass
class MetricReport:
    rmse: float
    pehe: Optional[float]
    if_pehe: float
    overlap: dict
    model: str = ""
    seed: Optional[int] = None
    gamma: Optional[float] = None
    error: str = ""

    @property
    def pehe_root(self) -> Optional[float]:
        return None if self.pehe is None else float(np.sqrt(self.pehe))

    def row(self) -> dict:
        ov = self.overlap or {}
        return {
            "model": self.model,
            "seed": self.seed,
            "gamma": self.gamma,
            "rmse": self.rmse,
            "pehe": self.pehe,
            "pehe_root": self.pehe_root,
            "if_pehe": self.if_pehe,
            "overlap_min": ov.get("min"),
            "overlap_max": ov.get("max"),
            "outside_frac": ov.get("outside_frac"),
        }


def evaluate_predictions(ds: LongitudinalDataset, y_factual, tau_hat, a_hat=None,
                         plugin: Optional[PluginModels] = None, **labels) -> MetricReport:
    """Build a :class:`MetricReport` for one model on one scored dataset."""
    plugin = plugin if plugin is not None else fit_plugin(ds)
    r = rmse(y_factual, ds.y, ds.mask)
    p = pehe(tau_hat, ds.tau_true, ds.mask) if ds.has_counterfactuals else None
    ip = if_pehe(ds, tau_hat, plugin)
    ov = overlap_diag(np.clip(a_hat[ds.mask], 1e-12, 1 - 1e-12)) if a_hat is not None else {}
    return MetricReport(rmse=r, pehe=p, if_pehe=ip, overlap=ov, **labels)
