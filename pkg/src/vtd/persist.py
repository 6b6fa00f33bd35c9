"""Save and load fitted models (VTD, factual RNN, g-formula) as parameter manifests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

import numpy as np

from .baselines import GFormulaModel, init_factual_rnn
from .io import load_arrays, save_arrays
from .model import ModelConfig, init_vtd
from .params import named_arrays, with_arrays

MODEL_KINDS = ("vtd", "factual_rnn", "gformula")


@dataclass
class FittedModel:
    kind: str
    params: Any  # VtdParams | FactualRnnParams | GFormulaModel
    config: dict
    extra: dict = dataclasses.field(default_factory=dict)


def model_config_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_model(path, fitted: FittedModel) -> None:
    if fitted.kind == "gformula":
        m = fitted.params
        arrays = {"coef": m.coef, "intercept": np.array([m.intercept])}
        config = {"window": m.window, "ridge": m.ridge}
    else:
        arrays = named_arrays(fitted.params)
        config = fitted.config
    save_arrays(path, fitted.kind, arrays, config, fitted.extra)


def _template(kind: str, config: dict):
    cfg = ModelConfig(**{**config, "propensity_clip": tuple(config.get("propensity_clip", (0.05, 0.95)))})
    rng = np.random.default_rng(0)
    if kind == "vtd":
        return init_vtd(cfg, rng)
    return init_factual_rnn(cfg, rng)


def load_model(path) -> FittedModel:
    kind, config, extra, arrays = load_arrays(path)
    if kind not in MODEL_KINDS:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    if kind == "gformula":
        model = GFormulaModel(int(config["window"]), arrays["coef"], float(arrays["intercept"][0]),
                              float(config["ridge"]))
        return FittedModel(kind, model, config, extra)
    params = with_arrays(_template(kind, config), arrays)
    return FittedModel(kind, params, config, extra)


def model_config(fitted: FittedModel) -> ModelConfig:
    cfg = dict(fitted.config)
    cfg["propensity_clip"] = tuple(cfg.get("propensity_clip", (0.05, 0.95)))
    return ModelConfig(**cfg)
