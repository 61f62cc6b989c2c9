"""Parametric trait functions usable both from Python and inside jitted loops.

A :class:`TraitFunction` is a finite sum ``sum_t coef_t * shape_t(x)`` of shapes from a
small library; a :class:`PairFunction` is the two-argument analogue used for the
competition kernel and the jackpot intensity.  Both encode to flat numpy arrays so the
simulation engine can evaluate them without calling back into Python.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np
from numba import njit

from .traits import ConfigurationError, TraitSpace

# trait-function shape codes
T_CONST, T_TABLE, T_GAUSS, T_QUAD, T_LINEAR, T_COS, T_TABULATED = range(7)
# pair-function shape codes
P_CONST, P_TABLE, P_GAUSS, P_DIST = range(4)

_TRAIT_KINDS = {"const": T_CONST, "table": T_TABLE, "gaussian": T_GAUSS, "quadratic": T_QUAD,
                "linear": T_LINEAR, "cos": T_COS, "tabulated": T_TABULATED}
_PAIR_KINDS = {"const": P_CONST, "table": P_TABLE, "gaussian": P_GAUSS, "distance": P_DIST}


@njit(cache=True, nogil=True)
def eval_trait(F, x):
    kinds, coefs, poff, pars = F
    s = 0.0
    d = x.shape[0]
    for t in range(kinds.shape[0]):
        a = poff[t]
        kind = kinds[t]
        if kind == T_CONST:
            v = 1.0
        elif kind == T_TABLE:
            v = pars[a + int(x[0])]
        elif kind == T_GAUSS:
            r2 = 0.0
            for i in range(d):
                r2 += (x[i] - pars[a + i]) ** 2
            w = pars[a + d]
            v = math.exp(-0.5 * r2 / (w * w))
        elif kind == T_QUAD:
            r2 = 0.0
            for i in range(d):
                r2 += (x[i] - pars[a + i]) ** 2
            v = r2
        elif kind == T_LINEAR:
            v = 0.0
            for i in range(d):
                v += pars[a + i] * x[i]
        elif kind == T_COS:
            v = math.cos(pars[a] * x[int(pars[a + 2])] + pars[a + 1])
        else:  # T_TABULATED, piecewise linear on axis 0, clamped
            n = int(pars[a])
            g0 = a + 1
            v0 = a + 1 + n
            xv = x[0]
            if xv <= pars[g0]:
                v = pars[v0]
            elif xv >= pars[g0 + n - 1]:
                v = pars[v0 + n - 1]
            else:
                lo = 0
                hi = n - 1
                while hi - lo > 1:
                    mid = (lo + hi) // 2
                    if pars[g0 + mid] <= xv:
                        lo = mid
                    else:
                        hi = mid
                x0 = pars[g0 + lo]
                x1 = pars[g0 + hi]
                f = (xv - x0) / (x1 - x0)
                v = pars[v0 + lo] * (1.0 - f) + pars[v0 + hi] * f
        s += coefs[t] * v
    return s


@njit(cache=True, nogil=True)
def eval_pair(F, x, y):
    kinds, coefs, poff, pars = F
    s = 0.0
    for t in range(kinds.shape[0]):
        a = poff[t]
        kind = kinds[t]
        if kind == P_CONST:
            v = 1.0
        elif kind == P_TABLE:
            n = int(pars[a])
            v = pars[a + 1 + int(x[0]) * n + int(y[0])]
        elif kind == P_GAUSS:
            r2 = 0.0
            for i in range(x.shape[0]):
                r2 += (x[i] - y[i]) ** 2
            w = pars[a]
            v = math.exp(-0.5 * r2 / (w * w))
        else:  # P_DIST
            r2 = 0.0
            for i in range(x.shape[0]):
                r2 += (x[i] - y[i]) ** 2
            v = math.sqrt(r2)
        s += coefs[t] * v
    return s


@njit(cache=True, nogil=True)
def eval_trait_many(F, X):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = eval_trait(F, X[i])
    return out


@njit(cache=True, nogil=True)
def eval_pair_many(F, X, Y):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = eval_pair(F, X[i], Y[i])
    return out


@njit(cache=True, nogil=True)
def eval_pair_matrix(F, X, Y):
    out = np.empty((X.shape[0], Y.shape[0]))
    for i in range(X.shape[0]):
        for j in range(Y.shape[0]):
            out[i, j] = eval_pair(F, X[i], Y[j])
    return out


def _encode(terms, codes) -> tuple:
    kinds = np.array([codes[t.kind] for t in terms], dtype=np.int64)
    coefs = np.array([t.coef for t in terms], dtype=np.float64)
    offsets = [0]
    pars: list[float] = []
    for t in terms:
        pars.extend(t.params)
        offsets.append(len(pars))
    # numba dislikes empty float arrays of unknown provenance; keep one pad slot
    return kinds, coefs, np.array(offsets, dtype=np.int64), np.array(pars + [0.0], dtype=np.float64)


@dataclass(frozen=True)
class Term:
    kind: str
    coef: float
    params: tuple[float, ...] = ()


def _num(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{path}: expected a number, got {v!r}")
    return float(v)


def _vec(v, path: str) -> list[float]:
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return [float(v)]
    if not isinstance(v, (list, tuple)):
        raise ConfigurationError(f"{path}: expected a number or list of numbers")
    return [_num(e, f"{path}[{i}]") for i, e in enumerate(v)]


class TraitFunction:
    """Real function of one trait, ``x -> sum coef * shape(x)``."""

    def __init__(self, terms: Iterable[Term] = ()):
        self.terms: tuple[Term, ...] = tuple(terms)
        for t in self.terms:
            if t.kind not in _TRAIT_KINDS:
                raise ConfigurationError(f"unknown trait function kind {t.kind!r}")
        self._enc = _encode(self.terms, _TRAIT_KINDS) if self.terms else _encode(
            (Term("const", 0.0),), _TRAIT_KINDS)

    # constructors -------------------------------------------------------
    @classmethod
    def const(cls, value: float) -> "TraitFunction":
        return cls([Term("const", float(value))])

    @classmethod
    def table(cls, values: Sequence[float]) -> "TraitFunction":
        return cls([Term("table", 1.0, tuple(float(v) for v in values))])

    @classmethod
    def gaussian(cls, amp: float, center, width: float) -> "TraitFunction":
        c = tuple(float(v) for v in np.atleast_1d(center))
        return cls([Term("gaussian", float(amp), c + (float(width),))])

    @classmethod
    def quadratic(cls, amp: float, center) -> "TraitFunction":
        return cls([Term("quadratic", float(amp), tuple(float(v) for v in np.atleast_1d(center)))])

    @classmethod
    def linear(cls, coef, offset: float = 0.0) -> "TraitFunction":
        terms = [Term("linear", 1.0, tuple(float(v) for v in np.atleast_1d(coef)))]
        if offset:
            terms.insert(0, Term("const", float(offset)))
        return cls(terms)

    @classmethod
    def cos(cls, amp: float = 1.0, freq: float = 1.0, phase: float = 0.0, axis: int = 0):
        return cls([Term("cos", float(amp), (float(freq), float(phase), float(axis)))])

    @classmethod
    def tabulated(cls, grid, values) -> "TraitFunction":
        g = [float(v) for v in grid]
        vals = [float(v) for v in values]
        if len(g) != len(vals) or len(g) < 2 or any(b <= a for a, b in zip(g, g[1:])):
            raise ConfigurationError("tabulated function needs >= 2 increasing grid points")
        return cls([Term("tabulated", 1.0, (float(len(g)),) + tuple(g) + tuple(vals))])

    # algebra ------------------------------------------------------------
    def scaled(self, a: float) -> "TraitFunction":
        return TraitFunction(Term(t.kind, t.coef * a, t.params) for t in self.terms)

    def __add__(self, other: "TraitFunction") -> "TraitFunction":
        return TraitFunction(self.terms + other.terms)

    def __mul__(self, a: float) -> "TraitFunction":
        return self.scaled(float(a))

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return isinstance(other, TraitFunction) and self.terms == other.terms

    def __hash__(self):
        return hash(self.terms)

    def __repr__(self):
        return f"TraitFunction({list(self.terms)!r})"

    # evaluation ---------------------------------------------------------
    @property
    def encoded(self) -> tuple:
        return self._enc

    @property
    def constant_value(self) -> float | None:
        if all(t.kind == "const" for t in self.terms):
            return float(sum(t.coef for t in self.terms))
        return None

    @property
    def is_zero(self) -> bool:
        return self.constant_value == 0.0

    def __call__(self, X) -> np.ndarray | float:
        X = np.asarray(X, dtype=float)
        if X.ndim <= 1:
            return float(eval_trait(self._enc, np.atleast_1d(X).astype(np.float64)))
        return eval_trait_many(self._enc, np.ascontiguousarray(X))

    def range_bounds(self, space: TraitSpace) -> tuple[float, float]:
        """Crude interval containing the range of the function on ``space``."""
        lo_tot = hi_tot = 0.0
        slo, shi = space.lo, space.hi
        for t in self.terms:
            if t.kind == "const":
                lo, hi = 1.0, 1.0
            elif t.kind == "table":
                lo, hi = min(t.params), max(t.params)
            elif t.kind == "gaussian":
                lo, hi = 0.0, 1.0
            elif t.kind == "quadratic":
                c = np.asarray(t.params)
                far = np.maximum(np.abs(slo - c), np.abs(shi - c))
                lo, hi = 0.0, float(np.sum(far ** 2))
            elif t.kind == "linear":
                c = np.asarray(t.params)
                lo = float(np.sum(np.minimum(c * slo, c * shi)))
                hi = float(np.sum(np.maximum(c * slo, c * shi)))
            elif t.kind == "cos":
                lo, hi = -1.0, 1.0
            else:
                n = int(t.params[0])
                vals = t.params[1 + n:]
                lo, hi = min(vals), max(vals)
            a, b = t.coef * lo, t.coef * hi
            lo_tot += min(a, b)
            hi_tot += max(a, b)
        return lo_tot, hi_tot

    # config ---------------------------------------------------------------
    def to_config(self) -> Any:
        if len(self.terms) == 1 and self.terms[0].kind == "const":
            return self.terms[0].coef
        out = []
        for t in self.terms:
            p = t.params
            if t.kind == "const":
                out.append({"kind": "const", "value": t.coef})
            elif t.kind == "table":
                out.append({"kind": "table", "coef": t.coef, "values": list(p)})
            elif t.kind == "gaussian":
                out.append({"kind": "gaussian", "amp": t.coef, "center": list(p[:-1]),
                            "width": p[-1]})
            elif t.kind == "quadratic":
                out.append({"kind": "quadratic", "amp": t.coef, "center": list(p)})
            elif t.kind == "linear":
                out.append({"kind": "linear", "coef": [t.coef * v for v in p]})
            elif t.kind == "cos":
                out.append({"kind": "cos", "amp": t.coef, "freq": p[0], "phase": p[1],
                            "axis": int(p[2])})
            else:
                n = int(p[0])
                out.append({"kind": "tabulated", "coef": t.coef, "grid": list(p[1:1 + n]),
                            "values": list(p[1 + n:])})
        return out

    @classmethod
    def from_config(cls, spec, path: str = "function") -> "TraitFunction":
        if isinstance(spec, bool):
            raise ConfigurationError(f"{path}: expected a number or function spec")
        if isinstance(spec, (int, float)):
            return cls.const(float(spec))
        if isinstance(spec, list):
            terms: list[Term] = []
            for i, s in enumerate(spec):
                terms.extend(cls.from_config(s, f"{path}[{i}]").terms)
            return cls(terms)
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ConfigurationError(f"{path}: expected a number, list or mapping with 'kind'")
        kind = spec["kind"]
        try:
            if kind == "const":
                return cls.const(_num(spec["value"], f"{path}.value"))
            if kind == "table":
                f = cls.table(_vec(spec["values"], f"{path}.values"))
                return f.scaled(_num(spec.get("coef", 1.0), f"{path}.coef"))
            if kind == "gaussian":
                return cls.gaussian(_num(spec.get("amp", 1.0), f"{path}.amp"),
                                    _vec(spec["center"], f"{path}.center"),
                                    _num(spec["width"], f"{path}.width"))
            if kind == "quadratic":
                return cls.quadratic(_num(spec.get("amp", 1.0), f"{path}.amp"),
                                     _vec(spec["center"], f"{path}.center"))
            if kind == "linear":
                return cls.linear(_vec(spec["coef"], f"{path}.coef"),
                                  _num(spec.get("offset", 0.0), f"{path}.offset"))
            if kind == "cos":
                return cls.cos(_num(spec.get("amp", 1.0), f"{path}.amp"),
                               _num(spec.get("freq", 1.0), f"{path}.freq"),
                               _num(spec.get("phase", 0.0), f"{path}.phase"),
                               int(spec.get("axis", 0)))
            if kind == "tabulated":
                f = cls.tabulated(_vec(spec["grid"], f"{path}.grid"),
                                  _vec(spec["values"], f"{path}.values"))
                return f.scaled(_num(spec.get("coef", 1.0), f"{path}.coef"))
        except KeyError as exc:
            raise ConfigurationError(f"{path}: missing key {exc.args[0]!r}") from None
        raise ConfigurationError(f"{path}: unknown function kind {kind!r}")

    def check_space(self, space: TraitSpace, path: str = "function") -> None:
        for t in self.terms:
            if t.kind == "table" and (not space.is_finite or len(t.params) != space.n_labels):
                raise ConfigurationError(f"{path}: table needs one value per label")
            if t.kind in ("gaussian", "quadratic") and not space.is_finite:
                n = len(t.params) - (1 if t.kind == "gaussian" else 0)
                if n != space.dimension:
                    raise ConfigurationError(f"{path}: centre dimension mismatch")
            if t.kind == "linear" and len(t.params) != space.dimension:
                raise ConfigurationError(f"{path}: linear coefficient dimension mismatch")
            if t.kind == "cos" and int(t.params[2]) >= space.dimension:
                raise ConfigurationError(f"{path}: cos axis out of range")
            if t.kind == "gaussian" and t.params[-1] <= 0:
                raise ConfigurationError(f"{path}: gaussian width must be positive")


class PairFunction:
    """Nonnegative-by-convention function of two traits (competition, jackpot size)."""

    def __init__(self, terms: Iterable[Term] = ()):
        self.terms = tuple(terms)
        for t in self.terms:
            if t.kind not in _PAIR_KINDS:
                raise ConfigurationError(f"unknown pair function kind {t.kind!r}")
        self._enc = _encode(self.terms, _PAIR_KINDS) if self.terms else _encode(
            (Term("const", 0.0),), _PAIR_KINDS)

    @classmethod
    def const(cls, value: float) -> "PairFunction":
        return cls([Term("const", float(value))])

    @classmethod
    def table(cls, matrix) -> "PairFunction":
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigurationError("pair table must be square")
        return cls([Term("table", 1.0, (float(m.shape[0]),) + tuple(m.ravel()))])

    @classmethod
    def gaussian(cls, amp: float, width: float) -> "PairFunction":
        return cls([Term("gaussian", float(amp), (float(width),))])

    @classmethod
    def distance(cls, amp: float = 1.0) -> "PairFunction":
        return cls([Term("distance", float(amp))])

    def scaled(self, a: float) -> "PairFunction":
        return PairFunction(Term(t.kind, t.coef * a, t.params) for t in self.terms)

    def __add__(self, other: "PairFunction") -> "PairFunction":
        return PairFunction(self.terms + other.terms)

    def __eq__(self, other) -> bool:
        return isinstance(other, PairFunction) and self.terms == other.terms

    def __hash__(self):
        return hash(self.terms)

    def __repr__(self):
        return f"PairFunction({list(self.terms)!r})"

    @property
    def encoded(self) -> tuple:
        return self._enc

    @property
    def constant_value(self) -> float | None:
        if all(t.kind == "const" for t in self.terms):
            return float(sum(t.coef for t in self.terms))
        return None

    def __call__(self, x, y) -> float:
        return float(eval_pair(self._enc, np.atleast_1d(np.asarray(x, dtype=np.float64)),
                               np.atleast_1d(np.asarray(y, dtype=np.float64))))

    def matrix(self, X, Y) -> np.ndarray:
        return eval_pair_matrix(self._enc, np.ascontiguousarray(X, dtype=np.float64),
                                np.ascontiguousarray(Y, dtype=np.float64))

    def diagonal(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return eval_pair_many(self._enc, X, X)

    def range_bounds(self, space: TraitSpace) -> tuple[float, float]:
        lo_tot = hi_tot = 0.0
        for t in self.terms:
            if t.kind == "const":
                lo, hi = 1.0, 1.0
            elif t.kind == "table":
                vals = t.params[1:]
                lo, hi = min(vals), max(vals)
            elif t.kind == "gaussian":
                lo, hi = 0.0, 1.0
            else:
                lo, hi = 0.0, space.diameter()
                if space.is_finite:
                    hi = float(space.n_labels - 1)
            a, b = t.coef * lo, t.coef * hi
            lo_tot += min(a, b)
            hi_tot += max(a, b)
        return lo_tot, hi_tot

    def to_config(self) -> Any:
        if len(self.terms) == 1 and self.terms[0].kind == "const":
            return self.terms[0].coef
        out = []
        for t in self.terms:
            if t.kind == "const":
                out.append({"kind": "const", "value": t.coef})
            elif t.kind == "table":
                n = int(t.params[0])
                m = np.asarray(t.params[1:]).reshape(n, n)
                out.append({"kind": "table", "coef": t.coef, "values": m.tolist()})
            elif t.kind == "gaussian":
                out.append({"kind": "gaussian", "amp": t.coef, "width": t.params[0]})
            else:
                out.append({"kind": "distance", "amp": t.coef})
        return out

    @classmethod
    def from_config(cls, spec, path: str = "pair") -> "PairFunction":
        if isinstance(spec, bool):
            raise ConfigurationError(f"{path}: expected a number or function spec")
        if isinstance(spec, (int, float)):
            return cls.const(float(spec))
        if isinstance(spec, list):
            terms: list[Term] = []
            for i, s in enumerate(spec):
                terms.extend(cls.from_config(s, f"{path}[{i}]").terms)
            return cls(terms)
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ConfigurationError(f"{path}: expected a number, list or mapping with 'kind'")
        kind = spec["kind"]
        try:
            if kind == "const":
                return cls.const(_num(spec["value"], f"{path}.value"))
            if kind == "table":
                rows = spec["values"]
                if not isinstance(rows, list):
                    raise ConfigurationError(f"{path}.values: expected a matrix")
                m = [_vec(r, f"{path}.values[{i}]") for i, r in enumerate(rows)]
                return cls.table(m).scaled(_num(spec.get("coef", 1.0), f"{path}.coef"))
            if kind == "gaussian":
                return cls.gaussian(_num(spec.get("amp", 1.0), f"{path}.amp"),
                                    _num(spec["width"], f"{path}.width"))
            if kind == "distance":
                return cls.distance(_num(spec.get("amp", 1.0), f"{path}.amp"))
        except KeyError as exc:
            raise ConfigurationError(f"{path}: missing key {exc.args[0]!r}") from None
        raise ConfigurationError(f"{path}: unknown pair function kind {kind!r}")

    def check_space(self, space: TraitSpace, path: str = "pair") -> None:
        for t in self.terms:
            if t.kind == "table" and (not space.is_finite or int(t.params[0]) != space.n_labels):
                raise ConfigurationError(f"{path}: table must be n_labels x n_labels")
            if t.kind == "gaussian" and t.params[0] <= 0:
                raise ConfigurationError(f"{path}: gaussian width must be positive")
