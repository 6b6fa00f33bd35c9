"""Flat ``key = value`` configuration files with dotted section prefixes.

Example::

    # desk-scale benchmark
    sim.n_patients = 1000
    sim.n_covariates = 30
    model.hidden_size = 32
    experiment.models = vtd, factual_rnn, gformula
    experiment.gammas = 0, 0.6
    experiment.realizations = 10

Values are parsed as int, float, bool (true/false), ``none``, or a
comma-separated list of those; anything else stays a string.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .simulator import SimConfig

SECTIONS = ("sim", "model", "experiment", "gformula", "plugin", "data")
MODELS = ("vtd", "factual_rnn", "gformula")


class ConfigError(ValueError):
    pass


def _scalar(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_scalar(part.strip()) for part in text.split(",") if part.strip()]
    return _scalar(text)


def parse_config_text(text: str) -> dict[str, dict]:
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        out[section][name] = parse_value(value)
    return out


def _as_list(v) -> list:
    if v is None:
        return []
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentConfig:
    sim: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    models: list = field(default_factory=lambda: list(MODELS))
    realizations: int = 1
    seed_base: int = 0
    gammas: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    data_path: Optional[str] = None
    split: tuple = (0.6, 0.2, 0.2)
    gformula_window: int = 3
    gformula_ridge: float = 1.0
    plugin_window: int = 3
    output_dir: Optional[str] = None
    source_text: str = field(default="", repr=False)

    def __post_init__(self):
        if self.realizations < 1:
            raise ConfigError("experiment.realizations must be >= 1")
        unknown = [m for m in self.models if m not in MODELS]
        if unknown:
            raise ConfigError(f"unknown model(s) {unknown}; expected a subset of {MODELS}")
        if self.data_path is not None and not Path(self.data_path).exists():
            raise ConfigError(f"data.path {self.data_path!r} does not exist")
        sim_fields = {f.name for f in dataclasses.fields(SimConfig)}
        bad = set(self.sim) - sim_fields
        if bad:
            raise ConfigError(f"unknown sim keys {sorted(bad)}")
        model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
        bad = set(self.model) - model_fields
        if bad:
            raise ConfigError(f"unknown model keys {sorted(bad)}")

    def sim_config(self, gamma: float, seed: int) -> SimConfig:
        kw = dict(self.sim)
        for key in ("overlap_bounds", "beta"):
            if isinstance(kw.get(key), list):
                kw[key] = tuple(kw[key])
        return SimConfig(**{**kw, "gamma": float(gamma), "seed": int(seed)})

    def model_config(self, p: int, r: Optional[int] = None) -> ModelConfig:
        kw = dict(self.model)
        if isinstance(kw.get("propensity_clip"), list):
            kw["propensity_clip"] = tuple(kw["propensity_clip"])
        kw.setdefault("r", r if r is not None else 5)
        return ModelConfig(p=p, **{k: v for k, v in kw.items() if k != "p"})

    def seed_for(self, gamma_index: int, realization: int) -> int:
        """Seed of realization ``i`` at sweep position ``j``: seed_base + 10000 j + i."""
        return self.seed_base + 10000 * gamma_index + realization


def config_from_sections(sections: dict[str, dict], source_text: str = "", base_dir=None) -> ExperimentConfig:
    """Build an ExperimentConfig; a relative ``data.path`` resolves against ``base_dir``."""
    exp = sections.get("experiment", {})
    gf = sections.get("gformula", {})
    plug = sections.get("plugin", {})
    data = sections.get("data", {})
    kwargs = dict(
        sim=dict(sections.get("sim", {})),
        model=dict(sections.get("model", {})),
        source_text=source_text,
    )
    if "models" in exp:
        kwargs["models"] = [str(m) for m in _as_list(exp["models"])]
    if "gammas" in exp:
        kwargs["gammas"] = [float(g) for g in _as_list(exp["gammas"])]
    elif "gamma" in kwargs["sim"]:
        kwargs["gammas"] = [float(kwargs["sim"]["gamma"])]
    kwargs["sim"].pop("gamma", None)
    kwargs["sim"].pop("seed", None)
    for key, cast in (("realizations", int), ("seed_base", int)):
        if key in exp:
            kwargs[key] = cast(exp[key])
    if "split" in exp:
        kwargs["split"] = tuple(float(v) for v in _as_list(exp["split"]))
    if "output_dir" in exp:
        kwargs["output_dir"] = str(exp["output_dir"])
    if "window" in gf:
        kwargs["gformula_window"] = int(gf["window"])
    if "ridge" in gf:
        kwargs["gformula_ridge"] = float(gf["ridge"])
    if "window" in plug:
        kwargs["plugin_window"] = int(plug["window"])
    if data.get("path") is not None:
        path = Path(str(data["path"]))
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        kwargs["data_path"] = str(path)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Read a key=value config, or the run manifest written by a previous benchmark."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid manifest JSON ({err.msg})") from None
        if "config_text" not in doc:
            raise ConfigError(f"{path}: manifest lacks config_text")
        text = doc["config_text"]
    return config_from_sections(parse_config_text(text), text, path.parent)


def loads_config(text: str) -> ExperimentConfig:
    return config_from_sections(parse_config_text(text), text)
