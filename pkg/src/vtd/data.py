"""Containers for longitudinal observational data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

GROUND_TRUTH_FIELDS = ("z_true", "y_both_arms", "tau_true", "propensity_true")


@dataclass
class PatientSequence:
    id: str
    x: np.ndarray  # (T, p)
    a: np.ndarray  # (T,)
    y: np.ndarray  # (T,)
    mask: np.ndarray  # (T,) bool
    z_true: Optional[np.ndarray] = None
    y_both_arms: Optional[np.ndarray] = None
    tau_true: Optional[np.ndarray] = None
    propensity_true: Optional[np.ndarray] = None


@dataclass
class LongitudinalDataset:
    """N patients observed over T steps, stored as dense arrays.

    ``mask[i, t]`` marks observed steps; ground-truth fields are optional and
    only present for simulated data.
    """

    x: np.ndarray  # (N, T, p)
    a: np.ndarray  # (N, T) in {0, 1}
    y: np.ndarray  # (N, T)
    mask: Optional[np.ndarray] = None  # (N, T) bool
    ids: Optional[list] = None
    z_true: Optional[np.ndarray] = None  # (N, T, r)
    y_both_arms: Optional[np.ndarray] = None  # (N, T, 2)
    tau_true: Optional[np.ndarray] = None  # (N, T)
    propensity_true: Optional[np.ndarray] = None  # (N, T)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 3:
            raise ValueError(f"x must be (N, T, p), got shape {self.x.shape}")
        n, t, _ = self.x.shape
        self.a = np.asarray(self.a, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones((n, t), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        for name in ("a", "y", "mask"):
            if getattr(self, name).shape != (n, t):
                raise ValueError(f"{name} must have shape {(n, t)}, got {getattr(self, name).shape}")
        if not np.isin(self.a, (0, 1)).all():
            raise ValueError("treatments must be binary")
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]
        if len(self.ids) != n:
            raise ValueError("ids length does not match number of patients")
        for name in GROUND_TRUTH_FIELDS:
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_steps(self) -> int:
        return self.x.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[2]

    @property
    def n_confounders(self) -> Optional[int]:
        return None if self.z_true is None else self.z_true.shape[2]

    @property
    def has_counterfactuals(self) -> bool:
        return self.tau_true is not None

    def subset(self, index: Sequence[int]) -> "LongitudinalDataset":
        index = np.asarray(index, dtype=np.int64)
        kwargs = {
            name: (None if getattr(self, name) is None else getattr(self, name)[index])
            for name in ("x", "a", "y", "mask") + GROUND_TRUTH_FIELDS
        }
        return LongitudinalDataset(ids=[self.ids[i] for i in index], meta=dict(self.meta), **kwargs)

    def patient(self, i: int) -> PatientSequence:
        gt = {name: (None if getattr(self, name) is None else getattr(self, name)[i]) for name in GROUND_TRUTH_FIELDS}
        return PatientSequence(self.ids[i], self.x[i], self.a[i], self.y[i], self.mask[i], **gt)

    def treated_fraction(self) -> float:
        return float(self.a[self.mask].mean())


def split(dataset: LongitudinalDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Patient-level partition into train/validation/test (or any number of parts)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be positive and sum to 1")
    n = len(dataset)
    sizes = np.floor(fractions * n + 1e-9).astype(int)
    # Hand out the rounding remainder to the largest fractions first.
    for k in np.argsort(-fractions, kind="stable")[: n - sizes.sum()]:
        sizes[k] += 1
    if np.any(sizes == 0):
        raise ValueError(f"split of {n} patients by {fractions.tolist()} leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(sizes)[:-1]
    return tuple(dataset.subset(np.sort(part)) for part in np.split(order, bounds))
