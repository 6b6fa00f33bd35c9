"""Synthetic longitudinal data with hidden confounders.

Generative recipe, per realization (all coefficients drawn once from the seed):

* hidden confounders follow a lagged autoregression that also responds to past
  treatments,
  ``z[t, j] = mean_i(mu[i, j] z[t-i, j] + nu[i, j] a[t-i]) + N(0, sigma_z^2)``;
* proxies load on the current confounders,
  ``x[t, k] = mean_i(alpha[i, k] x[t-i, k]) + (W z[t])[k] + N(0, sigma_x^2)``;
* treatment is Bernoulli with logit ``lam * (gamma * z_s + (1 - gamma) * x_s - b)``
  where ``z_s``/``x_s`` are the means of the cross-sectionally standardized
  coordinates and ``b`` is bisected so about half of all steps are treated;
* outcome ``y = tanh(<theta_x, x> + <theta_z, z>) + a * (beta0 + <beta, z>) + noise``
  with both arms sharing one noise draw, so the true effect is noise-free.

``gamma`` moves assignment from the observed proxies (0) to the hidden
confounders (1).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import LongitudinalDataset, split  # noqa: F401  (split re-exported)

TARGET_TREATED = (0.45, 0.55)


class CalibrationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    n_patients: int = 4000
    n_steps: int = 10
    n_covariates: int = 100
    n_confounders: int = 5
    gamma: float = 0.6
    ar_order: int = 5
    sigma_z: float = 0.1
    sigma_x: float = 0.1
    sigma_y: float = 0.2
    overlap_scale: float = 1.5
    overlap_bounds: tuple = (0.01, 0.99)
    beta0: float = 1.0
    beta: Optional[tuple] = None  # drawn N(0, 1) per realization when None
    seed: int = 0

    def __post_init__(self):
        for name in ("n_patients", "n_steps", "n_covariates", "n_confounders", "ar_order"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if min(self.sigma_z, self.sigma_x, self.sigma_y) <= 0:
            raise ValueError("noise scales must be positive")
        lo, hi = self.overlap_bounds
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("overlap bounds must satisfy 0 < lo < hi < 1")
        if self.beta is not None and len(self.beta) != self.n_confounders:
            raise ValueError("beta must have one entry per confounder")

    @classmethod
    def desk(cls, **overrides) -> "SimConfig":
        """Small preset used by the acceptance runs."""
        base = dict(n_patients=1000, n_steps=10, n_covariates=30, n_confounders=5)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class _Draws:
    mu: np.ndarray  # (L, r)
    nu: np.ndarray  # (L, r)
    alpha: np.ndarray  # (L, p)
    loading: np.ndarray  # (p, r)
    theta_x: np.ndarray
    theta_z: np.ndarray
    beta: np.ndarray
    z_init: np.ndarray  # (N, L, r)
    x_init_noise: np.ndarray  # (N, L, p)
    eps_z: np.ndarray  # (N, T, r)
    eps_x: np.ndarray  # (N, T, p)
    eps_y: np.ndarray  # (N, T)
    uniform: np.ndarray  # (N, T)


def _ar_coefficients(rng, order: int, width: int) -> np.ndarray:
    lags = np.arange(1, order + 1)
    return rng.normal(1.0 - lags / order, 1.0 / order, size=(width, order)).T


def _draw(cfg: SimConfig) -> _Draws:
    rng = np.random.default_rng(cfg.seed)
    n, t, p, r, lag = cfg.n_patients, cfg.n_steps, cfg.n_covariates, cfg.n_confounders, cfg.ar_order
    mu = _ar_coefficients(rng, lag, r)
    nu = _ar_coefficients(rng, lag, r)
    alpha = _ar_coefficients(rng, lag, p)
    loading = rng.standard_normal((p, r)) / np.sqrt(r)
    theta_x = rng.standard_normal(p) / np.sqrt(p)
    # Positive loadings: confounding through z pushes outcomes in the direction of z_s.
    theta_z = np.abs(rng.standard_normal(r)) / np.sqrt(r)
    beta_draw = rng.standard_normal(r)
    beta = beta_draw if cfg.beta is None else np.asarray(cfg.beta, dtype=np.float64)
    return _Draws(
        mu=mu,
        nu=nu,
        alpha=alpha,
        loading=loading,
        theta_x=theta_x,
        theta_z=theta_z,
        beta=beta,
        z_init=rng.standard_normal((n, lag, r)),
        x_init_noise=rng.standard_normal((n, lag, p)) * cfg.sigma_x,
        eps_z=rng.standard_normal((n, t, r)) * cfg.sigma_z,
        eps_x=rng.standard_normal((n, t, p)) * cfg.sigma_x,
        eps_y=rng.standard_normal((n, t)) * cfg.sigma_y,
        uniform=rng.uniform(size=(n, t)),
    )


def standardized_summary(v: np.ndarray) -> np.ndarray:
    """Mean over coordinates of the cross-sectionally standardized columns of (N, d)."""
    sd = v.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return ((v - v.mean(axis=0)) / sd).mean(axis=1)


def treatment_probability(z_summary, x_summary, gamma: float, scale: float, intercept: float,
                          bounds=(0.01, 0.99)) -> np.ndarray:
    logit = scale * (gamma * np.asarray(z_summary) + (1.0 - gamma) * np.asarray(x_summary) - intercept)
    return np.clip(1.0 / (1.0 + np.exp(-logit)), *bounds)


def _roll(cfg: SimConfig, d: _Draws, intercept: float) -> dict:
    n, t_max, r, p, lag = cfg.n_patients, cfg.n_steps, cfg.n_confounders, cfg.n_covariates, cfg.ar_order
    z_hist = np.zeros((n, lag + t_max, r))
    x_hist = np.zeros((n, lag + t_max, p))
    a_hist = np.zeros((n, lag + t_max))
    z_hist[:, :lag] = d.z_init
    x_hist[:, :lag] = d.z_init @ d.loading.T + d.x_init_noise

    prop = np.zeros((n, t_max))
    y0 = np.zeros((n, t_max))
    tau = np.zeros((n, t_max))
    for t in range(t_max):
        k = lag + t
        # Row i-1 of each window holds lag i.
        z_lags = z_hist[:, k - lag : k][:, ::-1]
        x_lags = x_hist[:, k - lag : k][:, ::-1]
        a_lags = a_hist[:, k - lag : k][:, ::-1]
        z = (d.mu * z_lags + d.nu * a_lags[..., None]).sum(axis=1) / lag + d.eps_z[:, t]
        x = (d.alpha * x_lags).sum(axis=1) / lag + z @ d.loading.T + d.eps_x[:, t]
        pr = treatment_probability(
            standardized_summary(z), standardized_summary(x), cfg.gamma, cfg.overlap_scale, intercept,
            cfg.overlap_bounds,
        )
        a = (d.uniform[:, t] < pr).astype(np.float64)
        z_hist[:, k], x_hist[:, k], a_hist[:, k] = z, x, a
        prop[:, t] = pr
        y0[:, t] = np.tanh(x @ d.theta_x + z @ d.theta_z) + d.eps_y[:, t]
        tau[:, t] = cfg.beta0 + z @ d.beta
    return dict(z=z_hist[:, lag:], x=x_hist[:, lag:], a=a_hist[:, lag:], prop=prop, y0=y0, tau=tau)


def _calibrate(cfg: SimConfig, d: _Draws, max_iter: int = 60) -> tuple[float, dict]:
    lo_t, hi_t = TARGET_TREATED
    target = 0.5 * (lo_t + hi_t)
    lo, hi = -10.0, 10.0
    b = 0.0
    for _ in range(max_iter):
        out = _roll(cfg, d, b)
        frac = out["a"].mean()
        if abs(frac - target) < 0.01:
            return b, out
        # Larger intercept means fewer treated.
        if frac > target:
            lo = b
        else:
            hi = b
        b = 0.5 * (lo + hi)
    if lo_t <= frac <= hi_t:
        return b, out
    raise CalibrationError(
        f"treated fraction {frac:.4f} outside [{lo_t}, {hi_t}] after {max_iter} bisection steps"
    )


def simulate(config: SimConfig) -> LongitudinalDataset:
    """Generate one realization; a pure function of ``config``."""
    d = _draw(config)
    b, out = _calibrate(config, d)
    a = out["a"].astype(np.int64)
    y_both = np.stack([out["y0"], out["y0"] + out["tau"]], axis=-1)
    y = np.take_along_axis(y_both, a[..., None], axis=-1)[..., 0]
    meta = {
        "source": "simulator",
        "config": dataclasses.asdict(config),
        "intercept": b,
        "beta": d.beta.tolist(),
    }
    return LongitudinalDataset(
        x=out["x"],
        a=a,
        y=y,
        ids=[f"p{i:05d}" for i in range(config.n_patients)],
        z_true=out["z"],
        y_both_arms=y_both,
        tau_true=y_both[..., 1] - y_both[..., 0],
        propensity_true=out["prop"],
        meta=meta,
    )


def confounding_gap(ds: LongitudinalDataset) -> float:
    """|naive treated-minus-control mean outcome - mean true effect| over observed steps."""
    m = ds.mask
    a, y = ds.a[m], ds.y[m]
    naive = y[a == 1].mean() - y[a == 0].mean()
    return float(abs(naive - ds.tau_true[m].mean()))
