"""Trait spaces: boxes in R^l and finite label sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BOX = 0
FINITE = 1


class ConfigurationError(ValueError):
    """Raised when a model ingredient is declared inconsistently."""


@dataclass(frozen=True)
class TraitSpace:
    """Domain of the heritable trait.

    A box trait is a real vector of length ``dimension``; a finite-space trait is a
    label index, stored internally as a length-1 float vector holding the index.
    Bounds of a box may be infinite.
    """

    kind: str
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()
    labels: tuple[str, ...] = ()
    _lo: np.ndarray = field(init=False, repr=False, compare=False)
    _hi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "box":
            lo = np.asarray(self.lower, dtype=float)
            hi = np.asarray(self.upper, dtype=float)
            if lo.ndim != 1 or lo.size == 0 or lo.shape != hi.shape:
                raise ConfigurationError("box bounds must be non-empty vectors of equal length")
            if not np.all(lo < hi):
                raise ConfigurationError("box requires lower < upper componentwise")
            if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
                raise ConfigurationError("box bounds must not be NaN")
            object.__setattr__(self, "lower", tuple(float(v) for v in lo))
            object.__setattr__(self, "upper", tuple(float(v) for v in hi))
        elif self.kind == "finite":
            if len(self.labels) == 0:
                raise ConfigurationError("finite trait space needs at least one label")
            if len(set(self.labels)) != len(self.labels):
                raise ConfigurationError("finite trait labels must be pairwise distinct")
            object.__setattr__(self, "labels", tuple(str(v) for v in self.labels))
            n = len(self.labels)
            lo = np.zeros(1)
            hi = np.array([float(n - 1)])
        else:
            raise ConfigurationError(f"unknown trait space kind {self.kind!r}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "TraitSpace":
        return cls("box", lower=tuple(lower), upper=tuple(upper))

    @classmethod
    def interval(cls, lower: float, upper: float) -> "TraitSpace":
        return cls("box", lower=(lower,), upper=(upper,))

    @classmethod
    def finite(cls, labels: Sequence[str]) -> "TraitSpace":
        return cls("finite", labels=tuple(labels))

    @property
    def is_finite(self) -> bool:
        return self.kind == "finite"

    @property
    def dimension(self) -> int:
        return len(self.lower) if self.kind == "box" else 1

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def code(self) -> int:
        return FINITE if self.is_finite else BOX

    @property
    def lo(self) -> np.ndarray:
        return self._lo

    @property
    def hi(self) -> np.ndarray:
        return self._hi

    def as_trait(self, value) -> np.ndarray:
        """Normalise a user trait (label name, index, scalar or vector) to internal form."""
        if self.is_finite:
            if isinstance(value, str):
                try:
                    return np.array([float(self.labels.index(value))])
                except ValueError:
                    raise ConfigurationError(f"unknown label {value!r}") from None
            arr = np.atleast_1d(np.asarray(value, dtype=float))
            if arr.size != 1:
                raise ConfigurationError("finite traits are single labels")
            return arr
        arr = np.atleast_1d(np.asarray(value, dtype=float)).ravel()
        if arr.size != self.dimension:
            raise ConfigurationError(
                f"trait has {arr.size} coordinates, space has dimension {self.dimension}")
        return arr

    def contains(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.is_finite:
            v = x[0]
            return bool(x.size == 1 and v == int(v) and 0 <= v < self.n_labels)
        return bool(x.size == self.dimension and np.all(x >= self._lo) and np.all(x <= self._hi))

    def contains_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dimension)
        if self.is_finite:
            v = X[:, 0]
            return (v == np.floor(v)) & (v >= 0) & (v < self.n_labels)
        return np.all((X >= self._lo) & (X <= self._hi), axis=1)

    def order_key(self, x) -> tuple:
        """Key realising the total order: lexicographic coordinates / label index."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.is_finite:
            return (int(x[0]),)
        return tuple(float(v) for v in x)

    def label_of(self, x) -> str:
        return self.labels[int(np.atleast_1d(x)[0])]

    def describe(self, x):
        """User-facing representation of a trait: label string or list of floats."""
        if self.is_finite:
            return self.label_of(x)
        return [float(v) for v in np.atleast_1d(x)]

    def diameter(self) -> float:
        if self.is_finite:
            return float("nan")
        return float(np.linalg.norm(self._hi - self._lo))

    def probe_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Points for bound checks: all labels, or box corners, centre and uniform draws.

        Infinite box sides are probed on a wide finite window.
        """
        if self.is_finite:
            return np.arange(self.n_labels, dtype=float).reshape(-1, 1)
        lo = np.where(np.isfinite(self._lo), self._lo, -1e6)
        hi = np.where(np.isfinite(self._hi), self._hi, 1e6)
        d = self.dimension
        pts = [rng.uniform(lo, hi, size=(n, d)), ((lo + hi) / 2)[None, :]]
        if d <= 10:
            corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij"))
            pts.append(corners.reshape(d, -1).T)
        return np.vstack(pts)

    def grid(self, n: int = 33) -> np.ndarray:
        """Regular grid for sup-norm checks (per-axis ``n`` points, finite windows)."""
        if self.is_finite:
            return np.arange(self.n_labels, dtype=float).reshape(-1, 1)
        lo = np.where(np.isfinite(self._lo), self._lo, -10.0)
        hi = np.where(np.isfinite(self._hi), self._hi, 10.0)
        axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_config(self) -> dict:
        if self.is_finite:
            return {"kind": "finite", "labels": list(self.labels)}
        return {"kind": "box", "lower": list(self.lower), "upper": list(self.upper)}
