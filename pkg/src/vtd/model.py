"""Variational temporal deconfounder.

An LSTM reads ``[x_t, a_{t-1}]``.  From its states the model builds

* a posterior ``q(z_t | h_{t-1}, h_t)`` over the latent confounder,
* a prior ``p(z_t | h_{t-1})``,
* a decoder ``p(x_t | z_t, h_{t-1})``,
* a treatment head ``a_hat_t = F_a(z_t)`` and an outcome head ``y_hat_t = F_y(z_t, a_t)``.

Training minimizes ``l_s - alpha * l_elbo`` plus a cross-entropy term that
fits the treatment head.  ``l_s`` is the IPTW-weighted outcome loss and the
weights are computed from the detached treatment head.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import diffcore as dc
from .data import LongitudinalDataset
from .metrics import rmse
from .params import map_leaves, named_arrays
from .seqnets import LstmParams, RnnState, init_lstm, init_stack, lstm_step, stack_forward
from .training import fit

LOG2PI = math.log(2.0 * math.pi)
LOGVAR_BOUNDS = (-8.0, 8.0)
DECODER_LOGVAR_FLOOR = math.log(1e-4)
WEIGHT_FORMS = ("arm_selected", "paper_literal", "unit")
LOSS_FORMS = ("squared", "signed")


@dataclass
class ModelConfig:
    p: int
    r: int = 5
    hidden_size: int = 64
    head_hidden: Optional[int] = None  # defaults to hidden_size
    alpha: float = 0.1
    weight_form: str = "arm_selected"
    loss_form: str = "squared"
    propensity_clip: tuple = (0.05, 0.95)
    weight_cap: float = 10.0
    kl_warmup_epochs: int = 10
    bce_weight: float = 1.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10

    def __post_init__(self):
        if self.r < 1 or self.p < 1 or self.hidden_size < 1:
            raise ValueError("p, r and hidden_size must be >= 1")
        lo, hi = self.propensity_clip
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("propensity_clip must satisfy 0 < lo < hi < 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.weight_form not in WEIGHT_FORMS:
            raise ValueError(f"weight_form must be one of {WEIGHT_FORMS}")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"loss_form must be one of {LOSS_FORMS}")
        if self.kl_warmup_epochs < 0:
            raise ValueError("kl_warmup_epochs must be >= 0")
        self.propensity_clip = (float(lo), float(hi))

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.hidden_size

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class VtdParams:
    rnn: LstmParams
    enc: list  # posterior head on [h_{t-1}, h_t]
    prior: list  # prior head on h_{t-1}
    dec: list  # decoder on [z_t, h_{t-1}]
    treat: list  # F_a, sigmoid output
    outc: list  # F_y on [z_t, a_t], linear output


@dataclass
class GaussianParams:
    """Diagonal Gaussian; logvar is clamped into [-8, 8] on construction."""

    mean: Any
    logvar: Any

    def __post_init__(self):
        self.logvar = dc.clip(self.logvar, *LOGVAR_BOUNDS)
        self.mean = dc.as_var(self.mean)


@dataclass
class LatentSample:
    z: Any
    eps: np.ndarray


@dataclass
class LossBreakdown:
    l_s: float
    recon: float
    kl: float
    l_elbo: float
    total: float
    alpha: float
    bce: float = 0.0

    @classmethod
    def build(cls, l_s, recon, kl, alpha, bce=0.0) -> "LossBreakdown":
        l_elbo = recon - kl
        return cls(l_s, recon, kl, l_elbo, total_loss(l_s, l_elbo, alpha), alpha, bce)


def init_vtd(cfg: ModelConfig, rng: np.random.Generator) -> VtdParams:
    hid, hh, p, r = cfg.hidden_size, cfg.head_width, cfg.p, cfg.r
    return VtdParams(
        rnn=init_lstm(p + 1, hid, rng),
        enc=init_stack([2 * hid, hh, 2 * r], rng),
        prior=init_stack([hid, hh, 2 * r], rng),
        dec=init_stack([r + hid, hh, 2 * p], rng),
        treat=init_stack([r, hh, 1], rng, out_activation="sigmoid"),
        outc=init_stack([r + 1, hh, 1], rng),
    )


def zeros_like_params(params):
    return map_leaves(params, lambda _, v: np.zeros_like(dc.value_of(v)))


# -- building blocks ------------------------------------------------------------


def _split_gaussian(out: dc.Var, d: int) -> GaussianParams:
    return GaussianParams(out[..., :d], out[..., d:])


def encode_states(params: VtdParams, x: np.ndarray, a: np.ndarray, mask: np.ndarray) -> list:
    """Unroll the LSTM over a batch; returns [h_0, ..., h_T], each (B, hidden)."""
    n, t_max, p = x.shape
    hid = params.rnn.hidden_size
    state = RnnState.zeros(hid, n)
    states = [dc.as_var(state.h)]
    a_prev = np.zeros((n, 1))
    for t in range(t_max):
        step_in = np.concatenate([x[:, t], a_prev], axis=1)
        new = lstm_step(params.rnn, step_in, state)
        m = mask[:, t]
        if m.all():
            state = new
        elif m.any():
            keep = m[:, None].astype(np.float64)
            state = RnnState(new.h * keep + dc.as_var(state.h) * (1.0 - keep),
                             new.c * keep + dc.as_var(state.c) * (1.0 - keep))
        states.append(dc.as_var(state.h))
        a_prev = a[:, t : t + 1].astype(np.float64)
    return states


def encode(params: VtdParams, x_seq, a_seq, mask=None) -> np.ndarray:
    """States h_0..h_T for one patient, shape (T+1, hidden)."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    t_max = x_seq.shape[0]
    if t_max == 0:
        return np.zeros((1, params.rnn.hidden_size))
    mask = np.ones(t_max, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if x_seq.shape[1] + 1 != params.rnn.input_size or len(a_seq) != t_max or len(mask) != t_max:
        raise dc.ShapeError(
            f"encode: x {x_seq.shape}, a {len(a_seq)}, mask {len(mask)} inconsistent with "
            f"rnn input size {params.rnn.input_size}"
        )
    states = encode_states(params, x_seq[None], np.asarray(a_seq)[None], mask[None])
    return np.stack([s.value[0] for s in states])


def posterior(params: VtdParams, h_prev, h_curr) -> GaussianParams:
    out = stack_forward(params.enc, dc.concat([h_prev, h_curr], axis=-1))
    return _split_gaussian(out, out.shape[-1] // 2)


def prior(params: VtdParams, h_prev) -> GaussianParams:
    out = stack_forward(params.prior, h_prev)
    return _split_gaussian(out, out.shape[-1] // 2)


def sample_latent(g: GaussianParams, eps) -> LatentSample:
    eps = np.asarray(eps, dtype=np.float64)
    z = g.mean + dc.exp(dc.scale(g.logvar, 0.5)) * eps
    return LatentSample(z, eps)


def decode(params: VtdParams, z, h_prev) -> GaussianParams:
    z = z.z if isinstance(z, LatentSample) else z
    out = stack_forward(params.dec, dc.concat([z, h_prev], axis=-1))
    d = out.shape[-1] // 2
    return GaussianParams(out[..., :d], dc.clip(out[..., d:], DECODER_LOGVAR_FLOOR, None))


def treat_prob(params: VtdParams, z) -> dc.Var:
    z = z.z if isinstance(z, LatentSample) else z
    out = stack_forward(params.treat, z)
    return out[..., 0]


def outcome(params: VtdParams, z, a) -> dc.Var:
    z = z.z if isinstance(z, LatentSample) else dc.as_var(z)
    a = np.asarray(a, dtype=np.float64)
    if z.ndim == 1:
        a_col = a.reshape(1)
    else:
        a_col = np.broadcast_to(a, (z.shape[0],)).reshape(-1, 1)
    out = stack_forward(params.outc, dc.concat([z, a_col], axis=-1))
    return out[..., 0]


# -- loss terms -----------------------------------------------------------------


def iptw(a_hat, a, p_treated: float, form: str = "arm_selected", cap: float = np.inf) -> np.ndarray:
    """Inverse-probability-of-treatment weights from a clipped propensity."""
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if np.any((a_hat <= 0.0) | (a_hat >= 1.0)):
        raise ValueError("iptw: propensity must be clipped strictly inside (0, 1)")
    if form == "paper_literal":
        w = p_treated / a_hat + (1.0 - p_treated) / (1.0 - a_hat)
    elif form == "arm_selected":
        w = a * p_treated / a_hat + (1.0 - a) * (1.0 - p_treated) / (1.0 - a_hat)
    elif form == "unit":
        w = np.ones(np.broadcast(a_hat, a).shape)
    else:
        raise ValueError(f"unknown weight form {form!r}")
    return np.minimum(w, cap)


def _masked_mean(values: dc.Var, mask: np.ndarray) -> dc.Var:
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count == 0:
        raise ValueError("masked mean over an all-false mask")
    return dc.scale(dc.sum(values * m), 1.0 / count)


def supervised_loss(w, y_hat, y, mask=None, form: str = "squared"):
    """Masked mean of w * (y_hat - y)^2 (or of w * (y_hat - y) for ``form='signed'``)."""
    y = np.asarray(y, dtype=np.float64)
    mask = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    resid = dc.as_var(y_hat) - y
    term = dc.square(resid) if form == "squared" else resid
    return _masked_mean(term * np.asarray(w, dtype=np.float64), mask)


def gaussian_loglik(x, g: GaussianParams) -> dc.Var:
    """Diagonal Gaussian log density, summed over the last axis."""
    diff = dc.as_var(x) - g.mean
    terms = dc.scale(g.logvar, -0.5) - dc.scale(dc.square(diff) * dc.exp(-g.logvar), 0.5) - 0.5 * LOG2PI
    return dc.sum(terms, axis=-1)


def kl_diag(q: GaussianParams, p: GaussianParams) -> dc.Var:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    inner = p.logvar - q.logvar + (dc.exp(q.logvar) + dc.square(q.mean - p.mean)) * dc.exp(-p.logvar) - 1.0
    return dc.scale(dc.sum(inner, axis=-1), 0.5)


def total_loss(l_s, l_elbo, alpha: float):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return l_s - alpha * l_elbo


# -- batched forward ------------------------------------------------------------


def _time_major(arr: np.ndarray) -> np.ndarray:
    """(B, T, ...) -> (T*B, ...) with rows ordered by step, then patient."""
    arr = np.asarray(arr)
    return np.swapaxes(arr, 0, 1).reshape((-1,) + arr.shape[2:])


def _batch_major(flat: np.ndarray, n: int) -> np.ndarray:
    t = flat.shape[0] // n
    return np.swapaxes(flat.reshape((t, n) + flat.shape[1:]), 0, 1)


@dataclass
class Forward:
    post: GaussianParams
    prior: GaussianParams
    z: LatentSample
    dec: GaussianParams
    a_hat: dc.Var
    y_hat: dc.Var
    h_prev: dc.Var = field(repr=False)


def forward_batch(params: VtdParams, x, a, mask, eps=None, a_query=None) -> Forward:
    """All heads over a batch, flattened time-major.  ``eps=None`` uses posterior means."""
    states = encode_states(params, x, a, mask)
    h_prev = dc.concat(states[:-1], axis=0)
    h_curr = dc.concat(states[1:], axis=0)
    post = posterior(params, h_prev, h_curr)
    r = post.mean.shape[-1]
    if eps is None:
        eps_flat = np.zeros((h_prev.shape[0], r))
    else:
        eps_flat = _time_major(eps)
    z = sample_latent(post, eps_flat)
    a_in = _time_major(a if a_query is None else a_query)
    return Forward(
        post=post,
        prior=prior(params, h_prev),
        z=z,
        dec=decode(params, z, h_prev),
        a_hat=treat_prob(params, z),
        y_hat=outcome(params, z, a_in),
        h_prev=h_prev,
    )


def elbo_terms(params: VtdParams, x, a, mask, eps):
    """Per-step reconstruction log-likelihood and KL, flattened time-major."""
    fw = forward_batch(params, x, a, mask, eps)
    recon = gaussian_loglik(_time_major(x), fw.dec)
    kl = kl_diag(fw.post, fw.prior)
    return recon, kl, fw


def elbo(params: VtdParams, x_seq, a_seq, mask=None, eps_seq=None) -> tuple[float, float, float]:
    """(recon, kl, recon - kl) summed over the unmasked steps of one patient."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    t_max = x_seq.shape[0]
    mask = np.ones(t_max, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if t_max == 0 or not mask.any():
        return 0.0, 0.0, 0.0
    r = params.enc[-1].weight.shape[0] // 2
    eps = np.zeros((t_max, r)) if eps_seq is None else np.asarray(eps_seq, dtype=np.float64)
    recon, kl, _ = elbo_terms(params, x_seq[None], np.asarray(a_seq)[None], mask[None], eps[None])
    m = mask.astype(np.float64)
    rec, k = float(np.sum(recon.value * m)), float(np.sum(kl.value * m))
    return rec, k, rec - k


def batch_weights(fw, a_flat, p_treated: float, cfg: ModelConfig) -> np.ndarray:
    """Detached IPTW weights from the clipped treatment-head output."""
    lo, hi = cfg.propensity_clip
    return iptw(np.clip(fw.a_hat.value, lo, hi), a_flat, p_treated, cfg.weight_form, cfg.weight_cap)


def batch_objective(params: VtdParams, x, a, y, mask, eps, p_treated: float, cfg: ModelConfig,
                    kl_weight: float = 1.0, weights: Optional[np.ndarray] = None):
    """Training objective for one minibatch and its loss breakdown.

    recon/kl/l_elbo are per unmasked patient-step averages.  The objective is
    ``l_s - alpha * (recon - kl_weight * kl) + bce_weight * bce``; with
    ``kl_weight = 1`` it equals ``total + bce_weight * bce``.  ``weights``
    (time-major, shape (T*B,)) overrides the IPTW weights computed from the
    current treatment head, which finite-difference checks need.
    """
    recon, kl, fw = elbo_terms(params, x, a, mask, eps)
    m = _time_major(mask).astype(np.float64)
    a_flat = _time_major(a).astype(np.float64)
    y_flat = _time_major(y)

    if weights is None:
        weights = batch_weights(fw, a_flat, p_treated, cfg)
    l_s = supervised_loss(weights, fw.y_hat, y_flat, m, cfg.loss_form)

    recon_avg = _masked_mean(recon, m)
    kl_avg = _masked_mean(kl, m)
    bce_terms = -(a_flat * dc.log(fw.a_hat, dc.LOG_FLOOR) + (1.0 - a_flat) * dc.log(1.0 - fw.a_hat, dc.LOG_FLOOR))
    bce = _masked_mean(bce_terms, m)

    objective = l_s - cfg.alpha * (recon_avg - kl_weight * kl_avg) + cfg.bce_weight * bce
    breakdown = LossBreakdown.build(
        float(l_s.value), float(recon_avg.value), float(kl_avg.value), cfg.alpha, float(bce.value)
    )
    return objective, breakdown


# -- inference ------------------------------------------------------------------


def _chunks(n: int, size: int = 512):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def predict_outcomes(params: VtdParams, ds: LongitudinalDataset) -> dict[str, np.ndarray]:
    """Posterior-mean predictions for every patient-step: y0, y1, factual, a_hat, z."""
    n, t_max = len(ds), ds.n_steps
    out = {k: np.zeros((n, t_max)) for k in ("y0", "y1", "factual", "a_hat")}
    zs = []
    for sl in _chunks(n):
        x, a, mask = ds.x[sl], ds.a[sl], ds.mask[sl]
        fw = forward_batch(params, x, a, mask)
        nb = x.shape[0]
        y0 = outcome(params, fw.z, np.zeros(nb * t_max)).value
        y1 = outcome(params, fw.z, np.ones(nb * t_max)).value
        out["y0"][sl] = _batch_major(y0, nb)
        out["y1"][sl] = _batch_major(y1, nb)
        out["factual"][sl] = _batch_major(fw.y_hat.value, nb)
        out["a_hat"][sl] = _batch_major(fw.a_hat.value, nb)
        zs.append(_batch_major(fw.post.mean.value, nb))
    out["z"] = np.concatenate(zs, axis=0) if zs else np.zeros((0, t_max, 0))
    return out


def predict_ite_all(params: VtdParams, ds: LongitudinalDataset) -> np.ndarray:
    pred = predict_outcomes(params, ds)
    return pred["y1"] - pred["y0"]


def predict_ite(params: VtdParams, x_seq, a_seq, mask, t: int) -> float:
    """One-step effect at step ``t`` using the posterior mean of z_t."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    mask = np.ones(x_seq.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not 0 <= t < len(mask) or not mask[t]:
        raise ValueError(f"predict_ite: step {t} is masked or out of range")
    states = encode_states(params, x_seq[None], np.asarray(a_seq)[None], mask[None])
    g = posterior(params, states[t], states[t + 1])
    z = g.mean
    return float(outcome(params, z, 1.0).value[0] - outcome(params, z, 0.0).value[0])


def infer_latents(params: VtdParams, x_seq, a_seq, mask=None) -> np.ndarray:
    """Posterior means of z_1..z_T for one patient, shape (T, r)."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    mask = np.ones(x_seq.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    states = encode_states(params, x_seq[None], np.asarray(a_seq)[None], mask[None])
    r = params.enc[-1].weight.shape[0] // 2
    if len(states) == 1:
        return np.zeros((0, r))
    g = posterior(params, dc.concat(states[:-1], axis=0), dc.concat(states[1:], axis=0))
    return g.mean.value.copy()


# -- training -------------------------------------------------------------------


def estimate_p_treated(ds: LongitudinalDataset) -> float:
    return ds.treated_fraction()


def train(train_data: LongitudinalDataset, val_data: LongitudinalDataset, cfg: ModelConfig,
          rng: np.random.Generator | int):
    """Fit VTD by minibatch Adam with early stopping on validation factual RMSE.

    Returns ``(params, history)`` where history is a list of
    :class:`~vtd.training.EpochRecord`.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if cfg.p != train_data.n_covariates:
        raise ValueError(f"config p={cfg.p} but data has {train_data.n_covariates} covariates")
    params = init_vtd(cfg, rng)
    p_treated = estimate_p_treated(train_data)

    def objective(traced, idx, epoch, rng_):
        x, a, y, mask = train_data.x[idx], train_data.a[idx], train_data.y[idx], train_data.mask[idx]
        eps = rng_.standard_normal((len(idx), train_data.n_steps, cfg.r))
        warm = 1.0 if cfg.kl_warmup_epochs == 0 else min(1.0, (epoch + 1) / cfg.kl_warmup_epochs)
        return batch_objective(traced, x, a, y, mask, eps, p_treated, cfg, warm)

    def validate(p):
        pred = predict_outcomes(p, val_data)["factual"]
        return rmse(pred, val_data.y, val_data.mask)

    return fit(params, objective, len(train_data), cfg, rng, validate)


def param_count(params) -> int:
    return int(sum(v.size for v in named_arrays(params).values()))
