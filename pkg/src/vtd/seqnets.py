"""LSTM cell and dense layers on top of :mod:`vtd.diffcore`.

Parameters are plain dataclasses whose array fields hold either numpy arrays
(inference) or :class:`~vtd.diffcore.Var` leaves (training).  The forward
functions accept both; numpy inputs are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import diffcore as dc

ACTIVATIONS = ("linear", "tanh", "sigmoid", "softplus")
GATES = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    """Weights of a single LSTM layer, gate order (input, forget, cell, output)."""

    w_in: Any  # (4, hidden, input)
    w_rec: Any  # (4, hidden, hidden)
    bias: Any  # (4, hidden)

    @property
    def hidden_size(self) -> int:
        return dc.value_of(self.w_rec).shape[1]

    @property
    def input_size(self) -> int:
        return dc.value_of(self.w_in).shape[2]


@dataclass
class RnnState:
    h: Any
    c: Any

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None) -> "RnnState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class DenseParams:
    weight: Any  # (out, in)
    bias: Any  # (out,)
    activation: str = field(default="linear")

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")


def _activate(x: dc.Var, activation: str) -> dc.Var:
    if activation == "linear":
        return x
    if activation == "tanh":
        return dc.tanh(x)
    if activation == "sigmoid":
        return dc.sigmoid(x)
    return dc.softplus(x)


def _as_batch(x) -> tuple[dc.Var, bool]:
    x = dc.as_var(x)
    if x.ndim == 1:
        return dc.reshape(x, (1, x.shape[0])), True
    return x, False


def lstm_step(params: LstmParams, x, state: RnnState) -> RnnState:
    """One LSTM update.  ``x`` is (input,) or (batch, input)."""
    xb, single = _as_batch(x)
    hb, _ = _as_batch(state.h)
    cb, _ = _as_batch(state.c)
    n_in, hid = params.input_size, params.hidden_size
    if xb.shape[1] != n_in:
        raise dc.ShapeError(f"lstm_step: input has {xb.shape[1]} features, params expect {n_in}")
    if hb.shape[1] != hid or cb.shape[1] != hid:
        raise dc.ShapeError(f"lstm_step: state size {hb.shape[1]}/{cb.shape[1]}, params expect {hid}")

    w_in = dc.transpose(dc.reshape(params.w_in, (4 * hid, n_in)))
    w_rec = dc.transpose(dc.reshape(params.w_rec, (4 * hid, hid)))
    bias = dc.reshape(params.bias, (4 * hid,))
    pre = xb @ w_in + hb @ w_rec + bias

    i = dc.sigmoid(pre[:, 0:hid])
    f = dc.sigmoid(pre[:, hid : 2 * hid])
    g = dc.tanh(pre[:, 2 * hid : 3 * hid])
    o = dc.sigmoid(pre[:, 3 * hid :])
    c_new = f * cb + i * g
    h_new = o * dc.tanh(c_new)
    if single:
        return RnnState(dc.reshape(h_new, (hid,)), dc.reshape(c_new, (hid,)))
    return RnnState(h_new, c_new)


def dense_forward(params: DenseParams, x) -> dc.Var:
    """activation(W @ x + b) for a vector or a (batch, in) matrix."""
    xb, single = _as_batch(x)
    w = dc.as_var(params.weight)
    if xb.shape[1] != w.shape[1]:
        raise dc.ShapeError(f"dense_forward: input has {xb.shape[1]} features, weight is {w.shape}")
    out = _activate(xb @ dc.transpose(w) + params.bias, params.activation)
    if single:
        return dc.reshape(out, (w.shape[0],))
    return out


def stack_forward(layers: Sequence[DenseParams], x) -> dc.Var:
    for layer in layers:
        x = dense_forward(layer, x)
    return x


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_dense(n_in: int, n_out: int, rng: np.random.Generator, activation: str = "linear") -> DenseParams:
    if n_in < 1 or n_out < 1:
        raise ValueError("dense layer dimensions must be positive")
    bound = glorot_bound(n_in, n_out)
    return DenseParams(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), activation)


def init_lstm(n_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0) -> LstmParams:
    """Glorot-uniform weights per gate block, zero biases except the forget gate."""
    if n_in < 1 or hidden < 1:
        raise ValueError("LSTM dimensions must be positive")
    b_in = glorot_bound(n_in, hidden)
    b_rec = glorot_bound(hidden, hidden)
    w_in = rng.uniform(-b_in, b_in, size=(4, hidden, n_in))
    w_rec = rng.uniform(-b_rec, b_rec, size=(4, hidden, hidden))
    bias = np.zeros((4, hidden))
    bias[1] = forget_bias
    return LstmParams(w_in, w_rec, bias)


def init_stack(sizes: Sequence[int], rng: np.random.Generator, out_activation: str = "linear",
               hidden_activation: str = "tanh") -> list[DenseParams]:
    """Dense stack through ``sizes`` (input, hidden..., output)."""
    layers = []
    for k in range(len(sizes) - 1):
        act = out_activation if k == len(sizes) - 2 else hidden_activation
        layers.append(init_dense(sizes[k], sizes[k + 1], rng, act))
    return layers


def init_params(spec: dict, rng: np.random.Generator) -> LstmParams | DenseParams:
    """Initialize from a layer spec: ``{"kind": "lstm"|"dense", "in": .., "out": .., "activation": ..}``."""
    kind = spec["kind"]
    if kind == "lstm":
        return init_lstm(spec["in"], spec["out"], rng)
    if kind == "dense":
        return init_dense(spec["in"], spec["out"], rng, spec.get("activation", "linear"))
    raise ValueError(f"unknown layer kind {kind!r}")
