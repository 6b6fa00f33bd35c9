"""Flatten/rebuild helpers for dataclass parameter trees.

A tree is a dataclass whose fields are arrays, nested dataclasses, or lists of
dataclasses.  String fields (activation tags) are carried along untouched.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Callable

import numpy as np

from . import diffcore as dc


def _is_leaf(v) -> bool:
    return isinstance(v, (np.ndarray, dc.Var))


def named_leaves(tree, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(tree):
        v = getattr(tree, f.name)
        key = f"{prefix}{f.name}"
        if _is_leaf(v):
            out[key] = v
        elif dataclasses.is_dataclass(v):
            out.update(named_leaves(v, key + "."))
        elif isinstance(v, list):
            for i, item in enumerate(v):
                out.update(named_leaves(item, f"{key}.{i}."))
    return out


def named_arrays(tree) -> dict[str, np.ndarray]:
    return {k: dc.value_of(v) for k, v in named_leaves(tree).items()}


def map_leaves(tree, fn: Callable[[str, Any], Any], prefix: str = ""):
    """Rebuild ``tree`` with every leaf replaced by ``fn(name, leaf)``."""
    changes = {}
    for f in dataclasses.fields(tree):
        v = getattr(tree, f.name)
        key = f"{prefix}{f.name}"
        if _is_leaf(v):
            changes[f.name] = fn(key, v)
        elif dataclasses.is_dataclass(v):
            changes[f.name] = map_leaves(v, fn, key + ".")
        elif isinstance(v, list):
            changes[f.name] = [map_leaves(item, fn, f"{key}.{i}.") for i, item in enumerate(v)]
    return dataclasses.replace(tree, **changes)


def with_arrays(tree, arrays: dict[str, np.ndarray]):
    """Copy of ``tree`` whose leaves come from ``arrays`` (shapes must match)."""

    def take(name, leaf):
        if name not in arrays:
            raise KeyError(f"missing parameter array {name!r}")
        new = np.asarray(arrays[name], dtype=np.float64)
        if new.shape != dc.value_of(leaf).shape:
            raise ValueError(f"parameter {name!r}: shape {new.shape} != expected {dc.value_of(leaf).shape}")
        return new.copy()

    return map_leaves(tree, take)


def as_leaves(tree) -> tuple[Any, dict[str, dc.Var]]:
    """Wrap every array in a named Var leaf; returns the traced tree and the leaves."""
    leaves: dict[str, dc.Var] = {}

    def wrap(name, leaf):
        var = dc.Var(dc.value_of(leaf), name=name)
        leaves[name] = var
        return var

    return map_leaves(tree, wrap), leaves


def copy_tree(tree):
    return map_leaves(tree, lambda _, leaf: dc.value_of(leaf).copy())


def all_finite(tree) -> bool:
    return all(np.all(np.isfinite(v)) for v in named_arrays(tree).values())
