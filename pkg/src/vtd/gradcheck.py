"""Finite-difference checks for every diffcore primitive and the full VTD objective."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import diffcore as dc
from .model import ModelConfig, _time_major, batch_objective, batch_weights, forward_batch, init_vtd
from .params import as_leaves, named_arrays, with_arrays

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4
FD_STEP = 1e-5


def _shape(rng, ndim=None) -> tuple:
    ndim = rng.integers(1, 3) if ndim is None else ndim
    return tuple(int(n) for n in rng.integers(1, 5, size=ndim))


def _u(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _clip_input(rng, shape):
    # Keep entries at least 0.05 from the clip bounds (+-1) where the gradient jumps.
    x = _u(rng, shape)
    near = np.abs(np.abs(x) - 1.0) < 0.05
    return np.where(near, x * 0.8, x)


def primitive_cases(rng: np.random.Generator) -> dict[str, Callable]:
    """Each entry draws (program, inputs) for one random case."""

    def unary(fn, lo=-2.0, hi=2.0):
        def draw():
            return fn, {"a": _u(rng, _shape(rng), lo, hi)}

        return draw

    def binary(fn):
        def draw():
            s = _shape(rng)
            # Occasionally broadcast the second operand along the first axis.
            s2 = (1,) + s[1:] if len(s) > 1 and rng.random() < 0.3 else s
            return fn, {"a": _u(rng, s), "b": _u(rng, s2)}

        return draw

    def matmul():
        n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
        return dc.matmul, {"a": _u(rng, (n, k)), "b": _u(rng, (k, m))}

    def broadcast():
        s = _shape(rng, 2)
        return (lambda a: dc.broadcast_to(a, (3,) + s)), {"a": _u(rng, s)}

    def concat():
        n = int(rng.integers(1, 4))
        return (lambda a, b: dc.concat([a, b], axis=1)), {"a": _u(rng, (n, 2)), "b": _u(rng, (n, 3))}

    def slice_():
        s = _shape(rng, 2)
        lo = int(rng.integers(0, s[1]))
        return (lambda a: a[:, lo:]), {"a": _u(rng, s)}

    def reshape():
        n, m = (int(v) for v in rng.integers(1, 5, size=2))
        return (lambda a: dc.reshape(a, (m, n))), {"a": _u(rng, (n, m))}

    def transpose():
        return dc.transpose, {"a": _u(rng, _shape(rng, 2))}

    def sum_():
        s = _shape(rng, 2)
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return (lambda a: dc.sum(a, axis=axis)), {"a": _u(rng, s)}

    def mean_():
        s = _shape(rng, 2)
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return (lambda a: dc.mean(a, axis=axis)), {"a": _u(rng, s)}

    def scale():
        c = float(rng.uniform(-2, 2))
        return (lambda a: dc.scale(a, c)), {"a": _u(rng, _shape(rng))}

    def clip():
        return (lambda a: dc.clip(a, -1.0, 1.0)), {"a": _clip_input(rng, _shape(rng))}

    return {
        "matmul": matmul,
        "add": binary(dc.add),
        "sub": binary(dc.sub),
        "mul": binary(dc.mul),
        "broadcast": broadcast,
        "concat": concat,
        "slice": slice_,
        "reshape": reshape,
        "transpose": transpose,
        "sigmoid": unary(dc.sigmoid),
        "tanh": unary(dc.tanh),
        "softplus": unary(dc.softplus),
        "exp": unary(dc.exp),
        "log": unary(dc.log, 0.1, 2.0),
        "square": unary(dc.square),
        "sum": sum_,
        "mean": mean_,
        "scale": scale,
        "clip": clip,
    }


def check_program(program, inputs, rng, step=FD_STEP) -> float:
    out = dc.evaluate(program, inputs)
    cot = None if out.size == 1 and out.ndim == 0 else rng.uniform(-1, 1, size=out.shape)
    analytic = dc.gradient(program, inputs, cot)
    numeric = dc.fd_gradient(program, inputs, step, cot)
    return dc.max_relative_error(analytic, numeric)


def check_primitives(n_cases: int = 50, seed: int = 0) -> dict[str, float]:
    """Max relative error per primitive over ``n_cases`` random cases."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, draw in primitive_cases(rng).items():
        worst = 0.0
        for _ in range(n_cases):
            program, inputs = draw()
            worst = max(worst, check_program(program, inputs, rng))
        results[name] = worst
    return results


def small_problem(seed: int = 0, p: int = 6, r: int = 2, hidden: int = 8, steps: int = 4, batch: int = 4,
                  alpha: float = 0.5):
    """Random small VTD problem with fixed reparameterization noise."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(p=p, r=r, hidden_size=hidden, alpha=alpha)
    params = init_vtd(cfg, rng)
    # Nudge biases off zero so every path carries gradient.
    params = with_arrays(params, {k: v + rng.normal(0, 0.1, v.shape) for k, v in named_arrays(params).items()})
    x = rng.normal(size=(batch, steps, p))
    a = rng.integers(0, 2, size=(batch, steps))
    y = rng.normal(size=(batch, steps))
    mask = np.ones((batch, steps), dtype=bool)
    mask[0, -1] = False
    eps = rng.normal(size=(batch, steps, r))
    return cfg, params, (x, a, y, mask, eps)


def check_vtd_objective(seed: int = 0, step: float = FD_STEP) -> float:
    """Max relative error of the full objective's gradient w.r.t. every VTD parameter."""
    cfg, params, (x, a, y, mask, eps) = small_problem(seed)
    p_treated = float(a[mask].mean())
    # The IPTW weights are detached in training, so hold them at the unperturbed point.
    fw = forward_batch(params, x, a, mask, eps)
    weights = batch_weights(fw, _time_major(a).astype(np.float64), p_treated, cfg)

    def objective(tree):
        return batch_objective(tree, x, a, y, mask, eps, p_treated, cfg, 1.0, weights=weights)[0]

    traced, leaves = as_leaves(params)
    names = list(leaves)
    analytic = dict(zip(names, dc.backward(objective(traced), [leaves[k] for k in names])))

    base = named_arrays(params)
    numeric = {}
    for name, arr in base.items():
        g = np.zeros(arr.size)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(objective(with_arrays(params, base)).value)
            flat[i] = orig - step
            f_minus = float(objective(with_arrays(params, base)).value)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * step)
        numeric[name] = g.reshape(arr.shape)
    return dc.max_relative_error(analytic, numeric)


def run(n_cases: int = 50, seed: int = 0) -> dict:
    """Full suite; returns per-check max errors, pass flags, and elapsed seconds."""
    t0 = time.perf_counter()
    prim = check_primitives(n_cases, seed)
    model_err = check_vtd_objective(seed)
    elapsed = time.perf_counter() - t0
    return {
        "primitives": prim,
        "vtd_objective": model_err,
        "primitives_ok": all(v <= PRIMITIVE_TOL for v in prim.values()),
        "vtd_ok": model_err <= MODEL_TOL,
        "seconds": elapsed,
    }
