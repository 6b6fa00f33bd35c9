"""Minibatch Adam with validation early stopping, shared by VTD and the RNN baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .params import as_leaves, copy_tree, map_leaves

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the objective or its gradient stops being finite."""

    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite {detail} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class EpochRecord:
    epoch: int
    loss: object  # LossBreakdown averaged over the epoch's batches
    objective: float
    val_rmse: float


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for name, value in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out[name] = value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def _average(records: list, weights: list):
    cls = type(records[0])
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    vals = {f.name: float(np.dot(w, [getattr(r, f.name) for r in records])) for f in fields(cls)}
    if hasattr(cls, "build"):
        return cls.build(vals["l_s"], vals["recon"], vals["kl"], vals["alpha"], vals.get("bce", 0.0))
    return cls(**vals)


def fit(
    params,
    objective: Callable,
    n_train: int,
    cfg,
    rng: np.random.Generator,
    validate: Callable,
    on_epoch: Optional[Callable] = None,
):
    """Generic training loop.

    ``objective(traced_params, batch_index, epoch, rng)`` returns
    ``(scalar Var, LossBreakdown)``; ``validate(params)`` returns the
    validation RMSE used for early stopping.  Returns the best parameters and
    the per-epoch history.
    """
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    best = copy_tree(params)
    best_val = validate(params)
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        records, sizes, objs = [], [], []
        for b, start in enumerate(range(0, n_train, cfg.batch_size)):
            idx = np.sort(order[start : start + cfg.batch_size])
            traced, leaves = as_leaves(params)
            obj, record = objective(traced, idx, epoch, rng)
            if not np.isfinite(obj.value).all():
                raise TrainingError(epoch, b, "objective")
            names = list(leaves)
            grads = dict(zip(names, dc.backward(obj, [leaves[k] for k in names])))
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(epoch, b, "gradient")
            updated = opt.step({k: leaves[k].value for k in names}, grads)
            params = map_leaves(params, lambda name, _: updated[name])
            records.append(record)
            sizes.append(len(idx))
            objs.append(float(obj.value))
        val = validate(params)
        loss = _average(records, sizes)
        history.append(EpochRecord(epoch, loss, float(np.average(objs, weights=sizes)), val))
        log.debug("epoch %d objective %.5f val_rmse %.5f", epoch, history[-1].objective, val)
        if on_epoch is not None:
            on_epoch(epoch, params, history[-1])
        if val < best_val:
            best_val, best, stale = val, copy_tree(params), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history
