"""The rescaled point measure ``(1/K) sum_i delta_{x_i}`` as a sorted multiset of atoms."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ._numeric import weighted_fsum
from .functions import PairFunction, TraitFunction
from .traits import ConfigurationError, TraitSpace

REFRESH_EVERY = 2 ** 14


class Population:
    """Multiset of traits with integer multiplicities, kept in ascending ≼ order.

    The total competition sum ``S = sum_i sum_j c(x_i, x_j) / K`` (self pairs included)
    is maintained incrementally and recomputed from scratch every ``refresh_every``
    events.
    """

    def __init__(self, space: TraitSpace, K: float, competition: PairFunction | None = None,
                 atoms: Iterable[tuple] = (), refresh_every: int = REFRESH_EVERY):
        self.space = space
        self.K = K
        self.competition = competition if competition is not None else PairFunction.const(0.0)
        self.refresh_every = int(refresh_every)
        self._keys: list[tuple] = []
        self._trait: dict[tuple, np.ndarray] = {}
        self._count: dict[tuple, int] = {}
        self.N = 0
        self._S = 0.0
        self._Sc = 0.0
        self.epoch = 0
        self._cum: np.ndarray | None = None
        for x, k in atoms:
            if int(k) > 0:
                self._add_atom(self.space.as_trait(x), int(k))
        self.refresh()

    # internal bookkeeping -------------------------------------------------
    def _add_atom(self, x: np.ndarray, k: int) -> None:
        key = self.space.order_key(x)
        if key in self._count:
            self._count[key] += k
        else:
            bisect.insort(self._keys, key)
            self._trait[key] = np.array(x, dtype=float)
            self._count[key] = k
        self.N += k
        self._cum = None

    def _cross(self, x: np.ndarray) -> float:
        """``sum_j m_j (c(x, x_j) + c(x_j, x))`` over the current atoms."""
        X, m = self.arrays()
        if len(m) == 0:
            return 0.0
        c = self.competition
        if c.constant_value is not None:
            return 2.0 * c.constant_value * self.N
        xs = np.repeat(x[None, :], len(m), axis=0)
        from .kernels import _pair_values

        v = _pair_values(c, xs, X) + _pair_values(c, X, xs)
        return weighted_fsum(m, v)

    def _bump_S(self, delta: float) -> None:
        t = self._S + delta
        if abs(self._S) >= abs(delta):
            self._Sc += (self._S - t) + delta
        else:
            self._Sc += (delta - t) + self._S
        self._S = t
        self.epoch += 1
        if self.epoch >= self.refresh_every:
            self.refresh()

    # public API -------------------------------------------------------------
    def refresh(self) -> None:
        """Recompute the competition sum from scratch."""
        X, m = self.arrays()
        if len(m) == 0:
            s = 0.0
        elif self.competition.constant_value is not None:
            s = self.competition.constant_value * float(self.N) ** 2 / self.K
        else:
            C = self.competition.matrix(X, X)
            w = np.outer(m, m).astype(float)
            s = weighted_fsum(w.ravel(), C.ravel()) / self.K
        self._S = s
        self._Sc = 0.0
        self.epoch = 0

    @property
    def competition_sum(self) -> float:
        return self._S + self._Sc

    @property
    def total_mass(self) -> float:
        return self.N / self.K

    @property
    def n_atoms(self) -> int:
        return len(self._keys)

    def __len__(self) -> int:
        return self.N

    def insert(self, x, k: int = 1) -> "Population":
        """Add ``k >= 1`` individuals at trait ``x``; returns ``self``."""
        k = int(k)
        if k < 1:
            raise ValueError("insert needs k >= 1")
        x = self.space.as_trait(x)
        c_xx = self.competition(x, x)
        delta = (k * self._cross(x) + k * k * c_xx) / self.K
        self._add_atom(x, k)
        self._bump_S(delta)
        return self

    def remove(self, i: int) -> "Population":
        """Remove the ``i``-th individual (1-based, ≼ order); returns ``self``."""
        key = self._key_at(i)
        x = self._trait[key]
        delta = (-self._cross(x) + self.competition(x, x)) / self.K
        self._count[key] -= 1
        if self._count[key] == 0:
            del self._count[key]
            del self._trait[key]
            self._keys.pop(bisect.bisect_left(self._keys, key))
        self.N -= 1
        self._cum = None
        self._bump_S(delta)
        return self

    def remove_trait(self, x) -> "Population":
        """Remove one individual carrying trait ``x``."""
        key = self.space.order_key(self.space.as_trait(x))
        if key not in self._count:
            raise IndexError(f"no individual at trait {x!r}")
        j = bisect.bisect_left(self._keys, key)
        first = 1 + (int(self._cumulative()[j - 1]) if j > 0 else 0)
        return self.remove(first)

    def _cumulative(self) -> np.ndarray:
        if self._cum is None:
            self._cum = np.cumsum([self._count[k] for k in self._keys], dtype=np.int64)
        return self._cum

    def _key_at(self, i: int) -> tuple:
        if not (1 <= i <= self.N):
            raise IndexError(f"individual index {i} out of range 1..{self.N}")
        j = int(np.searchsorted(self._cumulative(), i, side="left"))
        return self._keys[j]

    def canonical_index(self, i: int) -> np.ndarray:
        """Trait of the ``i``-th individual (1-based) in ascending ≼ order."""
        return self._trait[self._key_at(i)].copy()

    def atoms(self) -> list[tuple[np.ndarray, int]]:
        return [(self._trait[k].copy(), self._count[k]) for k in self._keys]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct traits ``(n_atoms, d)`` and multiplicities, in ≼ order."""
        d = self.space.dimension
        if not self._keys:
            return np.zeros((0, d)), np.zeros(0, dtype=np.int64)
        X = np.array([self._trait[k] for k in self._keys], dtype=float).reshape(-1, d)
        m = np.array([self._count[k] for k in self._keys], dtype=np.int64)
        return X, m

    def count_at(self, x) -> int:
        return self._count.get(self.space.order_key(self.space.as_trait(x)), 0)

    def integrate(self, phi) -> float:
        """``<nu, phi> = (1/K) sum_i phi(x_i)`` with correctly rounded summation."""
        X, m = self.arrays()
        if len(m) == 0:
            return 0.0
        vals = np.atleast_1d(np.asarray(_evaluate(phi, X), dtype=float))
        return weighted_fsum(m, vals) / self.K

    def copy(self) -> "Population":
        new = Population.__new__(Population)
        new.space = self.space
        new.K = self.K
        new.competition = self.competition
        new.refresh_every = self.refresh_every
        new._keys = list(self._keys)
        new._trait = {k: v.copy() for k, v in self._trait.items()}
        new._count = dict(self._count)
        new.N = self.N
        new._S, new._Sc, new.epoch = self._S, self._Sc, self.epoch
        new._cum = None
        return new

    def __eq__(self, other) -> bool:
        if not isinstance(other, Population):
            return NotImplemented
        return (self.space == other.space and self.K == other.K
                and self._keys == other._keys and self._count == other._count)

    def __repr__(self) -> str:
        return f"Population(K={self.K!r}, N={self.N}, atoms={self.n_atoms})"


def _evaluate(phi, X: np.ndarray):
    if isinstance(phi, TestFunction):
        return phi(X)
    if isinstance(phi, TraitFunction):
        return phi(X)
    if callable(phi):
        return phi(X)
    return np.full(len(X), float(phi))


@dataclass(frozen=True)
class TestFunction:
    """Bounded test function with optional attached generator images.

    ``fn`` maps an ``(n, d)`` trait array to ``n`` values.  ``A1``, ``A2`` and
    ``second_derivative`` follow the same convention.  ``lower`` is a declared
    strictly positive lower bound, required by the limit-martingale diagnostics.
    """

    __test__ = False  # not a pytest class

    name: str
    kind: str
    fn: TraitFunction | Callable
    lower: float | None = None
    upper: float | None = None
    A1: Callable | None = None
    A2: Callable | None = None
    second_derivative: Callable | None = None
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim <= 1
        X2 = np.atleast_2d(X) if not single else np.atleast_1d(X).reshape(1, -1)
        out = np.asarray(self.fn(X2), dtype=float)
        out = np.broadcast_to(out, (len(X2),)).copy()
        return out[0] if single else out

    def with_generators(self, A1=None, A2=None) -> "TestFunction":
        return TestFunction(self.name, self.kind, self.fn, self.lower, self.upper,
                            A1 if A1 is not None else self.A1,
                            A2 if A2 is not None else self.A2,
                            self.second_derivative, self.params)

    @property
    def bounded_away_from_zero(self) -> bool:
        return self.lower is not None and self.lower > 0

    @classmethod
    def constant(cls, value: float = 1.0) -> "TestFunction":
        f = TraitFunction.const(value)
        zero = lambda X: np.zeros(len(np.atleast_2d(X)))  # noqa: E731
        return cls("constant", "constant", f, lower=float(value), upper=float(value),
                   A1=zero, A2=zero, second_derivative=zero, params={"value": value})

    @classmethod
    def from_trait_function(cls, name: str, f: TraitFunction,
                            space: TraitSpace) -> "TestFunction":
        lo, hi = f.range_bounds(space)
        return cls(name, "closed_form", f, lower=lo, upper=hi)

    @classmethod
    def bump(cls, base: float = 0.5, center: float = 0.5, width: float = 0.15,
             amp: float = 1.0) -> "TestFunction":
        """``base + amp * exp(-(x - center)^2 / (2 width^2))`` on axis 0."""
        f = TraitFunction.const(base) + TraitFunction.gaussian(amp, center, width)

        def d2(X):
            x = np.atleast_2d(X)[:, 0]
            u = (x - center) / width
            return amp * (u * u - 1.0) / width ** 2 * np.exp(-0.5 * u * u)

        return cls("bump", "closed_form", f, lower=base, upper=base + amp,
                   second_derivative=d2,
                   params={"base": base, "center": center, "width": width, "amp": amp})

    @classmethod
    def cosine(cls, freq: float = 1.0, base: float = 2.0) -> "TestFunction":
        """``base + cos(freq x)`` on axis 0 (positive for base > 1)."""
        f = TraitFunction.const(base) + TraitFunction.cos(1.0, freq)

        def d2(X):
            return -freq ** 2 * np.cos(freq * np.atleast_2d(X)[:, 0])

        return cls("cosine", "closed_form", f, lower=base - 1.0, upper=base + 1.0,
                   second_derivative=d2, params={"freq": freq, "base": base})

    @classmethod
    def tabulated(cls, grid, values) -> "TestFunction":
        f = TraitFunction.tabulated(grid, values)
        return cls("tabulated", "tabulated", f, lower=float(min(values)),
                   upper=float(max(values)))

    @classmethod
    def indicator(cls, label: int, n_labels: int) -> "TestFunction":
        vals = [0.0] * n_labels
        vals[label] = 1.0
        return cls(f"indicator[{label}]", "closed_form", TraitFunction.table(vals),
                   lower=0.0, upper=1.0)

    @classmethod
    def preset(cls, spec, space: TraitSpace | None = None) -> "TestFunction":
        """Build from a config entry: a number, a preset name or a mapping."""
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            return cls.constant(float(spec))
        if isinstance(spec, str):
            spec = {"preset": spec}
        if not isinstance(spec, dict):
            raise ConfigurationError(f"test function: cannot interpret {spec!r}")
        spec = dict(spec)
        name = spec.pop("preset", None)
        if name in ("constant", "one"):
            return cls.constant(float(spec.get("value", 1.0)))
        if name == "bump":
            return cls.bump(**{k: float(v) for k, v in spec.items()})
        if name == "cosine":
            return cls.cosine(**{k: float(v) for k, v in spec.items()})
        if name == "tabulated":
            return cls.tabulated(spec["grid"], spec["values"])
        if name == "indicator":
            if space is None or not space.is_finite:
                raise ConfigurationError("indicator test functions need a finite space")
            label = spec["label"]
            idx = space.labels.index(label) if isinstance(label, str) else int(label)
            return cls.indicator(idx, space.n_labels)
        if name == "function":
            if space is None:
                raise ConfigurationError("function test functions need a trait space")
            return cls.from_trait_function("function", TraitFunction.from_config(spec["fn"]),
                                           space)
        raise ConfigurationError(f"unknown test function preset {name!r}")

    def to_config(self):
        if self.name == "constant":
            return {"preset": "constant", "value": self.params["value"]}
        if self.name in ("bump", "cosine"):
            return {"preset": self.name, **self.params}
        if isinstance(self.fn, TraitFunction):
            return {"preset": "function", "fn": self.fn.to_config()}
        raise ConfigurationError("test function cannot be serialised")


def brute_force_competition_sum(pop: Population) -> float:
    """O(N^2) reference value of ``sum_i sum_j c(x_i, x_j) / K`` over individuals."""
    X, m = pop.arrays()
    if pop.N == 0:
        return 0.0
    T = np.repeat(X, m, axis=0)
    return math.fsum(pop.competition.matrix(T, T).ravel().tolist()) / pop.K
