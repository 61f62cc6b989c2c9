"""Model ingredients: offspring laws, mutation kernels and the per-K kernel set.

Each ingredient is an immutable dataclass with a flat array encoding consumed by the
jitted samplers below, so the same object drives both the Python reference path and
the compiled engine.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numba import njit

from ._numeric import gauss_legendre as _gauss_legendre_ref
from ._numeric import gl_interval, ndtri, norm_cdf, norm_sf, weighted_fsum
from .functions import PairFunction, TraitFunction, eval_pair, eval_trait
from .traits import ConfigurationError, TraitSpace

log = logging.getLogger(__name__)

# offspring law codes
L_SINGLE, L_BETA, L_JACKPOT, L_PMF = range(4)
# mutation kernel codes
M_NONE, M_GAUSS, M_PARETO, M_MATRIX, M_HIST = range(5)

DEFAULT_KMAX = 10 ** 9
_WALK_LIMIT = 256
_REJECTION_CAP = 10_000


class KernelBoundError(ConfigurationError):
    """A rate function left its declared bound on a probed trait."""


# ---------------------------------------------------------------------------
# offspring laws
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _beta_log_survival(n, beta):
    # log P(k > n) for the beta-stable law, n >= 1
    return math.lgamma(n - beta) - math.lgamma(1.0 - beta) - math.lgamma(n + 1.0)


@njit(cache=True, nogil=True)
def _sample_beta(beta, kmax, u):
    if beta >= 1.0:
        return 2
    # linear walk on the survival recurrence S(n+1) = S(n) (n - beta) / (n + 1)
    s = 1.0
    n = 1
    while n < _WALK_LIMIT:
        s *= (n - beta) / (n + 1.0)
        n += 1
        if s < u:
            return n if n < kmax else kmax
        if n >= kmax:
            return kmax
    # bisection on the closed-form survival for the far tail
    lu = math.log(u)
    lo = n
    hi = 2 * n
    while _beta_log_survival(float(hi), beta) >= lu:
        if hi >= kmax:
            return kmax
        lo = hi
        hi = min(2 * hi, kmax)
    # invariant: S(lo) >= u > S(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _beta_log_survival(float(mid), beta) >= lu:
            lo = mid
        else:
            hi = mid
    return hi


@njit(cache=True, nogil=True)
def sample_k_nb(L, x, h, gen):
    code, beta, kmax, cdf, jack = L
    if code == L_SINGLE:
        return 1
    if code == L_BETA:
        return _sample_beta(beta, kmax, 1.0 - gen.random())
    if code == L_JACKPOT:
        lam = eval_pair(jack, x, h)
        if lam <= 0.0:
            return 1
        return 1 + gen.poisson(lam)
    u = gen.random()
    return int(np.searchsorted(cdf, u, side="right")) + 1


@njit(cache=True, nogil=True)
def gm1_nb(L, x, h, s):
    """g(x, h, e^{-s}) - 1 evaluated without cancellation, s >= 0."""
    code, beta, kmax, cdf, jack = L
    w = -math.expm1(-s)
    if code == L_SINGLE:
        return -w
    if code == L_BETA:
        return w ** (1.0 + beta) / beta - (1.0 + beta) / beta * w
    if code == L_JACKPOT:
        lam = eval_pair(jack, x, h)
        return math.expm1(-s - lam * w)
    acc = 0.0
    prev = 0.0
    for i in range(cdf.shape[0]):
        pk = cdf[i] - prev
        prev = cdf[i]
        acc += pk * math.expm1(-(i + 1.0) * s)
    return acc


@njit(cache=True, nogil=True)
def pgf_nb(L, x, h, z):
    code, beta, kmax, cdf, jack = L
    if code == L_SINGLE:
        return z
    if code == L_BETA:
        return (1.0 - z) ** (1.0 + beta) / beta + (1.0 + beta) / beta * z - 1.0 / beta
    if code == L_JACKPOT:
        return z * math.exp(-eval_pair(jack, x, h) * (1.0 - z))
    acc = 0.0
    prev = 0.0
    zk = 1.0
    for i in range(cdf.shape[0]):
        zk *= z
        acc += (cdf[i] - prev) * zk
        prev = cdf[i]
    return acc


@njit(cache=True, nogil=True)
def mean_nb(L, x, h):
    code, beta, kmax, cdf, jack = L
    if code == L_SINGLE:
        return 1.0
    if code == L_BETA:
        return (1.0 + beta) / beta
    if code == L_JACKPOT:
        return 1.0 + eval_pair(jack, x, h)
    acc = 0.0
    prev = 0.0
    for i in range(cdf.shape[0]):
        acc += (i + 1.0) * (cdf[i] - prev)
        prev = cdf[i]
    return acc


@njit(cache=True, nogil=True)
def _sample_many_k(L, x, h, n, gen):
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = sample_k_nb(L, x, h, gen)
    return out


def beta_stable_pmf(beta: float, kmax: int) -> np.ndarray:
    """Probabilities of k = 1..kmax for the beta-stable law (tail mass not included)."""
    p = np.zeros(kmax)
    if kmax < 2:
        return p
    if beta >= 1.0:
        p[1] = 1.0
        return p
    p[1] = (1.0 + beta) / 2.0
    for k in range(2, kmax):
        p[k] = p[k - 1] * (k - 1 - beta) / (k + 1)
    return p


def beta_stable_survival(beta: float, n) -> np.ndarray:
    """P(k > n) for the beta-stable law."""
    from scipy.special import gammaln

    n = np.asarray(n, dtype=float)
    if beta >= 1.0:
        return np.where(n < 2, 1.0, 0.0)
    return np.exp(gammaln(n - beta) - gammaln(1.0 - beta) - gammaln(n + 1.0))


@dataclass(frozen=True)
class OffspringLaw:
    """Distribution of the number of children born at one reproduction event (k >= 1)."""

    preset: str
    beta: float = 1.0
    kmax: int = DEFAULT_KMAX
    jackpot: PairFunction | None = None
    pmf: tuple[float, ...] = ()
    _enc: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.preset == "beta_stable":
            if not (0.0 < self.beta <= 1.0):
                raise ConfigurationError("β must lie in (0,1]")
            if self.kmax < 2:
                raise ConfigurationError("kmax must be at least 2")
        elif self.preset == "jackpot":
            if not isinstance(self.jackpot, PairFunction):
                raise ConfigurationError("jackpot law needs a pair function for its intensity")
        elif self.preset == "pmf":
            p = np.asarray(self.pmf, dtype=float)
            if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
                raise ConfigurationError("offspring pmf must be a non-empty nonnegative table")
            total = math.fsum(p)
            if abs(total - 1.0) > 1e-9:
                raise ConfigurationError(f"offspring pmf sums to {total!r}, expected 1")
        elif self.preset != "single":
            raise ConfigurationError(f"unknown offspring preset {self.preset!r}")
        cdf = np.zeros(1)
        if self.preset == "pmf":
            p = np.asarray(self.pmf, dtype=float)
            cdf = np.cumsum(p / math.fsum(p))
            cdf[-1] = 1.0
        jack = (self.jackpot or PairFunction.const(0.0)).encoded
        code = {"single": L_SINGLE, "beta_stable": L_BETA, "jackpot": L_JACKPOT,
                "pmf": L_PMF}[self.preset]
        object.__setattr__(self, "_enc", (np.int64(code), float(self.beta),
                                          np.int64(self.kmax), cdf, jack))

    @classmethod
    def single(cls) -> "OffspringLaw":
        return cls("single")

    @classmethod
    def beta_stable(cls, beta: float, kmax: int = DEFAULT_KMAX) -> "OffspringLaw":
        return cls("beta_stable", beta=float(beta), kmax=int(kmax))

    @classmethod
    def jackpot_law(cls, intensity: PairFunction | float) -> "OffspringLaw":
        if not isinstance(intensity, PairFunction):
            intensity = PairFunction.const(float(intensity))
        return cls("jackpot", jackpot=intensity)

    @classmethod
    def custom_pmf(cls, table: Mapping[int, float] | Sequence[float]) -> "OffspringLaw":
        """Table indexed by k (mapping) or listing P(1), P(2), ... (sequence).

        Tables summing to 1 within 1e-9 are renormalised once.
        """
        if isinstance(table, Mapping):
            if not table:
                raise ConfigurationError("offspring pmf must be non-empty")
            keys = [int(k) for k in table]
            if min(keys) < 1:
                bad = [k for k in keys if k < 1 and table[k] != 0]
                if bad:
                    raise ConfigurationError("offspring pmf must be supported on k >= 1")
            probs = [0.0] * max(keys)
            for k, v in table.items():
                if int(k) >= 1:
                    probs[int(k) - 1] = float(v)
        else:
            probs = [float(v) for v in table]
        total = math.fsum(probs)
        if probs and abs(total - 1.0) <= 1e-9 and total != 1.0:
            log.info("offspring pmf renormalised by factor %r", 1.0 / total)
            probs = [v / total for v in probs]
        return cls("pmf", pmf=tuple(probs))

    @property
    def encoded(self) -> tuple:
        return self._enc

    def mean_bound(self, space: TraitSpace) -> float:
        """Upper bound on the mean offspring number over the trait space."""
        if self.preset == "jackpot":
            return 1.0 + max(0.0, self.jackpot.range_bounds(space)[1])
        return mean_nb(self._enc, np.zeros(1), np.zeros(1))

    def to_config(self) -> dict:
        if self.preset == "single":
            return {"preset": "single"}
        if self.preset == "beta_stable":
            return {"preset": "beta_stable", "beta": self.beta, "kmax": self.kmax}
        if self.preset == "jackpot":
            return {"preset": "jackpot", "intensity": self.jackpot.to_config()}
        return {"preset": "pmf", "pmf": list(self.pmf)}

    @classmethod
    def from_config(cls, spec: Mapping, path: str = "offspring") -> "OffspringLaw":
        preset = spec.get("preset")
        if preset == "single":
            return cls.single()
        if preset == "beta_stable":
            return cls.beta_stable(float(spec["beta"]), int(spec.get("kmax", DEFAULT_KMAX)))
        if preset == "jackpot":
            return cls.jackpot_law(PairFunction.from_config(spec["intensity"],
                                                            f"{path}.intensity"))
        if preset == "pmf":
            return cls.custom_pmf(spec["pmf"])
        raise ConfigurationError(f"{path}.preset: unknown offspring preset {preset!r}")


def _check_z(z: float) -> None:
    if not (0.0 <= z <= 1.0):
        raise ValueError(f"pgf argument must lie in [0,1], got {z!r}")


def offspring_pgf(law: OffspringLaw, x, h, z: float) -> float:
    """Generating function of the offspring number, z in [0, 1]."""
    _check_z(z)
    return float(pgf_nb(law.encoded, _vec(x), _vec(h), float(z)))


def offspring_gm1(law: OffspringLaw, x, h, s: float) -> float:
    """``g(x, h, exp(-s)) - 1`` computed without cancellation for small ``s``."""
    return float(gm1_nb(law.encoded, _vec(x), _vec(h), float(s)))


def offspring_mean(law: OffspringLaw, x, h) -> float:
    return float(mean_nb(law.encoded, _vec(x), _vec(h)))


def offspring_pmf(law: OffspringLaw, x, h, kmax: int = 200) -> np.ndarray:
    """Array ``p`` with ``p[k-1] = P(k)`` for k = 1..kmax."""
    x, h = _vec(x), _vec(h)
    if law.preset == "single":
        p = np.zeros(kmax)
        p[0] = 1.0
        return p
    if law.preset == "beta_stable":
        return beta_stable_pmf(law.beta, min(kmax, law.kmax))
    if law.preset == "jackpot":
        from scipy.stats import poisson

        lam = law.jackpot(x, h)
        if lam <= 0:
            p = np.zeros(kmax)
            p[0] = 1.0
            return p
        return poisson.pmf(np.arange(kmax), lam)
    p = np.zeros(max(kmax, len(law.pmf)))
    p[:len(law.pmf)] = law.pmf
    return p[:kmax]


def sample_offspring_count(law: OffspringLaw, x, h, rng: np.random.Generator,
                           size: int | None = None):
    """Offspring number(s) drawn from ``rng``; ``size`` draws a vector."""
    if size is None:
        return int(sample_k_nb(law.encoded, _vec(x), _vec(h), rng))
    return _sample_many_k(law.encoded, _vec(x), _vec(h), int(size), rng)


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64)).ravel()


# ---------------------------------------------------------------------------
# mutation kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _tail_trunc(za, zb, gen):
    """Standard normal on [za, zb] with zb << 0: exponential proposal below zb, then rejection."""
    lam = -zb
    width = zb - za
    cut = -math.expm1(-lam * width)
    while True:
        t = -math.log1p(-gen.random() * cut) / lam
        if gen.random() < math.exp(-0.5 * t * t):
            return zb - t


@njit(cache=True, nogil=True)
def _trunc_gauss(mu, s, lo, hi, gen):
    za = (lo - mu) / s
    zb = (hi - mu) / s
    if zb < -8.0:
        z = _tail_trunc(za, zb, gen)
    elif za > 8.0:
        z = -_tail_trunc(-zb, -za, gen)
    elif za > 0.0:
        a = norm_sf(zb)
        b = norm_sf(za)
        z = -ndtri(a + gen.random() * (b - a))
    else:
        a = norm_cdf(za)
        b = norm_cdf(zb)
        z = ndtri(a + gen.random() * (b - a))
    v = mu + s * z
    return min(max(v, lo), hi)


@njit(cache=True, nogil=True)
def _pareto_coord(xc, s, beta, lo, hi, gen):
    # symmetric Lomax offset |h - x| = Y / s, P(Y > y) = (1 + y)^-beta, conditioned on [lo, hi]
    vp = (1.0 + s * (hi - xc)) ** (-beta) if hi < math.inf else 0.0
    vm = (1.0 + s * (xc - lo)) ** (-beta) if lo > -math.inf else 0.0
    mp = 1.0 - vp
    mm = 1.0 - vm
    if mp + mm <= 0.0:
        return xc
    u = gen.random() * (mp + mm)
    if u < mp:
        v = vp + (1.0 - vp) * gen.random()
        sign = 1.0
    else:
        v = vm + (1.0 - vm) * gen.random()
        sign = -1.0
    if v <= 0.0:
        v = 5e-324
    y = v ** (-1.0 / beta) - 1.0
    out = xc + sign * y / s
    return min(max(out, lo), hi)


@njit(cache=True, nogil=True)
def sample_mutant_nb(M, x, gen):
    code, std, shift, beta, scale, rowcdf, edges, hcdf, lo, hi = M
    d = x.shape[0]
    h = np.empty(d)
    if code == M_NONE:
        for i in range(d):
            h[i] = x[i]
        return h
    if code == M_MATRIX:
        n = rowcdf.shape[1]
        u = gen.random()
        row = int(x[0])
        j = 0
        while j < n - 1 and rowcdf[row, j] <= u:
            j += 1
        h[0] = float(j)
        return h
    if code == M_GAUSS:
        for _ in range(_REJECTION_CAP):
            ok = True
            for i in range(d):
                h[i] = x[i] + shift + std * gen.standard_normal()
                if h[i] < lo[i] or h[i] > hi[i]:
                    ok = False
            if ok:
                return h
        for i in range(d):
            h[i] = _trunc_gauss(x[i] + shift, std, lo[i], hi[i], gen)
        return h
    if code == M_PARETO:
        for i in range(d):
            h[i] = _pareto_coord(x[i], scale, beta, lo[i], hi[i], gen)
        return h
    # histogram of offsets h - x on axis 0, truncated to the box
    nb = edges.shape[0] - 1
    a = lo[0] - x[0]
    b = hi[0] - x[0]
    masses = np.zeros(nb)
    tot = 0.0
    for j in range(nb):
        l = max(edges[j], a)
        r = min(edges[j + 1], b)
        if r > l:
            w = hcdf[j + 1] - hcdf[j]
            masses[j] = w * (r - l) / (edges[j + 1] - edges[j])
            tot += masses[j]
    for i in range(d):
        h[i] = x[i]
    if tot <= 0.0:
        return h
    u = gen.random() * tot
    acc = 0.0
    jj = nb - 1
    for j in range(nb):
        acc += masses[j]
        if u < acc:
            jj = j
            break
    l = max(edges[jj], a)
    r = min(edges[jj + 1], b)
    h[0] = min(max(x[0] + l + (r - l) * gen.random(), lo[0]), hi[0])
    return h


@njit(cache=True, nogil=True)
def _sample_many_mutants(M, x, n, gen):
    out = np.empty((n, x.shape[0]))
    for i in range(n):
        out[i] = sample_mutant_nb(M, x, gen)
    return out


@dataclass(frozen=True)
class MutationKernel:
    """Law of the mutant trait ``h`` given the parent trait ``x``.

    Presets: ``none`` (h = x), ``gaussian`` (per-coordinate std and mean shift,
    conditioned on the box), ``pareto`` (symmetric Lomax offsets of index ``beta``
    divided by ``scale``, conditioned on the box), ``matrix`` (row-stochastic
    transition matrix on a finite space) and ``histogram`` (piecewise-constant offset
    density on axis 0, truncated to the box).
    """

    preset: str
    space: TraitSpace
    std: float = 0.0
    shift: float = 0.0
    beta: float = 1.5
    scale: float = 1.0
    matrix: tuple[tuple[float, ...], ...] = ()
    edges: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    _enc: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sp = self.space
        rowcdf = np.zeros((1, 1))
        edges = np.zeros(2)
        hcdf = np.zeros(2)
        if self.preset == "gaussian":
            if sp.is_finite or not (self.std > 0 and math.isfinite(self.std)):
                raise ConfigurationError("gaussian mutation needs a box space and std > 0")
        elif self.preset == "pareto":
            if sp.is_finite or not (1.0 < self.beta < 2.0) or not self.scale > 0:
                raise ConfigurationError("pareto mutation needs a box space, beta in (1,2), "
                                         "scale > 0")
        elif self.preset == "matrix":
            m = np.asarray(self.matrix, dtype=float)
            n = sp.n_labels
            if not sp.is_finite or m.shape != (n, n):
                raise ConfigurationError("mutation matrix must be n_labels x n_labels")
            if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
                raise ConfigurationError("mutation matrix rows must be probability vectors")
            rowcdf = np.cumsum(m / m.sum(axis=1, keepdims=True), axis=1)
            rowcdf[:, -1] = 1.0
        elif self.preset == "histogram":
            e = np.asarray(self.edges, dtype=float)
            w = np.asarray(self.weights, dtype=float)
            if sp.is_finite or e.size < 2 or w.size != e.size - 1 or np.any(np.diff(e) <= 0):
                raise ConfigurationError("histogram mutation needs increasing edges and one "
                                         "weight per bin on a box space")
            if np.any(w < 0) or w.sum() <= 0:
                raise ConfigurationError("histogram weights must be nonnegative")
            edges = e
            hcdf = np.concatenate([[0.0], np.cumsum(w / w.sum())])
        elif self.preset != "none":
            raise ConfigurationError(f"unknown mutation preset {self.preset!r}")
        code = {"none": M_NONE, "gaussian": M_GAUSS, "pareto": M_PARETO, "matrix": M_MATRIX,
                "histogram": M_HIST}[self.preset]
        enc = (np.int64(code), float(self.std), float(self.shift), float(self.beta),
               float(self.scale), np.ascontiguousarray(rowcdf), edges, hcdf,
               np.array(sp.lo, dtype=float), np.array(sp.hi, dtype=float))
        object.__setattr__(self, "_enc", enc)

    # constructors ---------------------------------------------------------
    @classmethod
    def none(cls, space: TraitSpace) -> "MutationKernel":
        return cls("none", space)

    @classmethod
    def gaussian(cls, space: TraitSpace, std: float, shift: float = 0.0) -> "MutationKernel":
        return cls("gaussian", space, std=float(std), shift=float(shift))

    @classmethod
    def pareto(cls, space: TraitSpace, beta: float, scale: float) -> "MutationKernel":
        return cls("pareto", space, beta=float(beta), scale=float(scale))

    @classmethod
    def transition_matrix(cls, space: TraitSpace, matrix) -> "MutationKernel":
        m = tuple(tuple(float(v) for v in row) for row in np.asarray(matrix, dtype=float))
        return cls("matrix", space, matrix=m)

    @classmethod
    def two_trait(cls, space: TraitSpace, q: Sequence[float]) -> "MutationKernel":
        """Switch to the other label with probability ``q[label]``, otherwise stay."""
        if not space.is_finite or space.n_labels != 2 or len(q) != 2:
            raise ConfigurationError("two_trait mutation needs a two-label space")
        q1, q2 = float(q[0]), float(q[1])
        if not (0 <= q1 <= 1 and 0 <= q2 <= 1):
            raise ConfigurationError("switch probabilities must lie in [0,1]")
        return cls.transition_matrix(space, [[1 - q1, q1], [q2, 1 - q2]])

    @classmethod
    def histogram(cls, space: TraitSpace, edges, weights) -> "MutationKernel":
        return cls("histogram", space, edges=tuple(float(v) for v in edges),
                   weights=tuple(float(v) for v in weights))

    @property
    def encoded(self) -> tuple:
        return self._enc

    def to_config(self) -> dict:
        if self.preset == "gaussian":
            return {"preset": "gaussian", "std": self.std, "shift": self.shift}
        if self.preset == "pareto":
            return {"preset": "pareto", "beta": self.beta, "scale": self.scale}
        if self.preset == "matrix":
            return {"preset": "matrix", "matrix": [list(r) for r in self.matrix]}
        if self.preset == "histogram":
            return {"preset": "histogram", "edges": list(self.edges),
                    "weights": list(self.weights)}
        return {"preset": "none"}

    @classmethod
    def from_config(cls, spec: Mapping, space: TraitSpace,
                    path: str = "mutation") -> "MutationKernel":
        preset = spec.get("preset")
        if preset == "none":
            return cls.none(space)
        if preset == "gaussian":
            return cls.gaussian(space, float(spec["std"]), float(spec.get("shift", 0.0)))
        if preset == "pareto":
            return cls.pareto(space, float(spec["beta"]), float(spec["scale"]))
        if preset == "matrix":
            return cls.transition_matrix(space, spec["matrix"])
        if preset == "two_trait":
            return cls.two_trait(space, spec["q"])
        if preset == "histogram":
            return cls.histogram(space, spec["edges"], spec["weights"])
        raise ConfigurationError(f"{path}.preset: unknown mutation preset {preset!r}")

    # queries ----------------------------------------------------------------
    def transition_row(self, x) -> np.ndarray:
        """Mutant label probabilities from label ``x`` (finite spaces)."""
        if self.preset == "none":
            row = np.zeros(self.space.n_labels)
            row[int(_vec(x)[0])] = 1.0
            return row
        return np.asarray(self.matrix[int(_vec(x)[0])], dtype=float)

    def expectation(self, x, f: Callable[[np.ndarray], np.ndarray], n: int = 64) -> float:
        """``∫ f(h) m(x, dh)`` by exact summation or Gauss-Legendre quadrature.

        ``f`` maps an ``(m, d)`` array of traits to ``m`` values.
        """
        nodes, weights = self.quadrature(x, n)
        return weighted_fsum(weights, np.asarray(f(nodes), dtype=float))

    def quadrature(self, x, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Nodes ``(m, d)`` and weights summing to 1 representing ``m(x, dh)``."""
        x = _vec(x)
        sp = self.space
        if self.preset == "none":
            return x[None, :].copy(), np.ones(1)
        if self.preset == "matrix":
            row = self.transition_row(x)
            keep = np.nonzero(row > 0)[0]
            return keep.astype(float).reshape(-1, 1), row[keep]
        if self.preset == "histogram":
            return self._hist_quadrature(x, max(4, n // 4))
        d = sp.dimension
        per = n if d <= 2 else 32
        axes = []
        for i in range(d):
            if self.preset == "gaussian":
                axes.append(_gauss_axis(x[i] + self.shift, self.std, sp.lo[i], sp.hi[i],
                                        x[i], per))
            else:
                axes.append(_pareto_axis(x[i], self.scale, self.beta, sp.lo[i], sp.hi[i], per))
        if d == 1:
            nd, wt = axes[0]
            return nd.reshape(-1, 1), wt
        grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        wgrid = np.ones_like(grids[0])
        for i, a in enumerate(axes):
            shape = [1] * d
            shape[i] = -1
            wgrid = wgrid * a[1].reshape(shape)
        return np.stack([g.ravel() for g in grids], axis=1), wgrid.ravel()

    def quadrature_many(self, X, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Stacked quadrature rules: nodes ``(m, q, d)`` and weights ``(m, q)``.

        One-dimensional Gaussian kernels are handled in a single vectorised pass;
        other presets fall back to per-trait rules padded with zero weights.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        sp = self.space
        vectorised = self.preset == "gaussian" and sp.dimension == 1 and len(X)
        if vectorised:
            s = self.std
            x = X[:, 0]
            mu = x + self.shift
            lo, hi = sp.lo[0], sp.hi[0]
            a = np.maximum(lo, mu - 10 * s)
            b = np.minimum(hi, mu + 10 * s)
            # boxes beyond ten standard deviations need the edge rule
            vectorised = bool(np.all(a < b))
        if vectorised:
            c1 = np.clip(np.minimum(mu, x), a, b)
            c2 = np.clip(np.maximum(mu, x), a, b)
            g, gw = _gauss_legendre_ref(n)
            nodes, wts = [], []
            for l, r in ((a, c1), (c1, c2), (c2, b)):
                half = 0.5 * (r - l)
                nd = l[:, None] + half[:, None] * (g[None, :] + 1.0)
                nodes.append(nd)
                wts.append(half[:, None] * gw[None, :]
                           * np.exp(-0.5 * ((nd - mu[:, None]) / s) ** 2))
            nd = np.concatenate(nodes, axis=1)
            wt = np.concatenate(wts, axis=1) / (s * math.sqrt(2 * math.pi))
            from scipy.special import ndtr

            za, zb = (lo - mu) / s, (hi - mu) / s
            Z = np.where(za > 0, ndtr(-za) - ndtr(-zb), ndtr(zb) - ndtr(za))
            return nd[:, :, None], wt / Z[:, None]
        rules = [self.quadrature(x, n) for x in X]
        q = max((len(w) for _, w in rules), default=1)
        nodes = np.repeat(X[:, None, :], q, axis=1).copy()
        wts = np.zeros((len(X), q))
        for i, (nd, w) in enumerate(rules):
            nodes[i, :len(w)] = nd
            wts[i, :len(w)] = w
        return nodes, wts

    def _hist_quadrature(self, x, per_bin):
        lo, hi = self.space.lo[0], self.space.hi[0]
        e = np.asarray(self.edges)
        w = np.asarray(self.weights) / math.fsum(self.weights)
        nodes, wts = [], []
        for j in range(len(w)):
            left = max(e[j], lo - x[0])
            right = min(e[j + 1], hi - x[0])
            if right <= left or w[j] == 0:
                continue
            nd, wt = gl_interval(left, right, per_bin)
            nodes.append(nd)
            wts.append(wt * w[j] / (e[j + 1] - e[j]))
        if not nodes:
            return x[None, :].copy(), np.ones(1)
        nd = np.concatenate(nodes)
        wt = np.concatenate(wts)
        wt = wt / wt.sum()
        pts = np.repeat(x[None, :], len(nd), axis=0)
        pts[:, 0] = x[0] + nd
        return pts, wt


def _gauss_axis(mu, s, lo, hi, x, n):
    a = max(lo, mu - 10 * s)
    b = min(hi, mu + 10 * s)
    if a >= b:
        return _gauss_edge_axis(mu, s, lo, hi, n)
    cuts = sorted({a, b} | {c for c in (mu, x) if a < c < b})
    nodes, wts = [], []
    for l, r in zip(cuts, cuts[1:]):
        nd, wt = gl_interval(l, r, n)
        nodes.append(nd)
        wts.append(wt * np.exp(-0.5 * ((nd - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi)))
    nd = np.concatenate(nodes)
    wt = np.concatenate(wts)
    za, zb = (lo - mu) / s, (hi - mu) / s
    from scipy.special import ndtr

    z = (ndtr(-za) - ndtr(-zb)) if za > 0 else (ndtr(zb) - ndtr(za))
    return nd, wt / z


def _gauss_edge_axis(mu, s, lo, hi, n):
    """Rule for a box lying beyond ten standard deviations: mass sits at the near edge."""
    if mu > hi:
        edge, zc = hi, (mu - hi) / s
        l, r = max(lo, hi - 40.0 * s / zc), hi
    else:
        edge, zc = lo, (lo - mu) / s
        l, r = lo, min(hi, lo + 40.0 * s / zc)
    nd, wt = gl_interval(l, r, n)
    logw = -0.5 * ((nd - mu) / s) ** 2 + 0.5 * ((edge - mu) / s) ** 2
    wt = wt * np.exp(logw)
    return nd, wt / wt.sum()


def _pareto_axis(x, s, beta, lo, hi, n):
    vp = (1.0 + s * (hi - x)) ** (-beta) if math.isfinite(hi) else 0.0
    vm = (1.0 + s * (x - lo)) ** (-beta) if math.isfinite(lo) else 0.0
    mp, mm = 1 - vp, 1 - vm
    nodes, wts = [], []
    for sign, vmin, mass in ((1.0, vp, mp), (-1.0, vm, mm)):
        if mass <= 0:
            continue
        v, w = gl_interval(vmin, 1.0, n)
        y = v ** (-1.0 / beta) - 1.0
        nodes.append(np.clip(x + sign * y / s, lo, hi))
        wts.append(w / (1.0 - vmin) * mass / (mp + mm))
    if not nodes:
        return np.array([x]), np.ones(1)
    return np.concatenate(nodes), np.concatenate(wts)


def sample_mutant(kernel: MutationKernel, x, rng: np.random.Generator,
                  size: int | None = None) -> np.ndarray:
    """Mutant trait(s) drawn from ``m(x, .)``; always inside the trait space."""
    if size is None:
        return sample_mutant_nb(kernel.encoded, _vec(x), rng)
    return _sample_many_mutants(kernel.encoded, _vec(x), int(size), rng)


# ---------------------------------------------------------------------------
# the kernel set
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSet:
    """All model ingredients at system size ``K``.

    ``competition`` is the unscaled kernel ``c``; the per-pair rate is ``c / K``.
    Rate bounds default to analytic upper bounds of the parametric forms; declared
    bounds are verified by :meth:`validate`.
    """

    space: TraitSpace
    K: float
    birth: TraitFunction
    death: TraitFunction
    competition: PairFunction
    mutation_prob: TraitFunction
    mutation: MutationKernel
    offspring: OffspringLaw
    b_bar: float | None = None
    d_bar: float | None = None
    c_bar: float | None = None
    kappa_bound: float | None = None

    def __post_init__(self):
        if not self.K > 0:
            raise ConfigurationError("system size K must be positive")
        self.birth.check_space(self.space, "birth")
        self.death.check_space(self.space, "death")
        self.mutation_prob.check_space(self.space, "mutation_prob")
        self.competition.check_space(self.space, "competition")
        if self.offspring.jackpot is not None:
            self.offspring.jackpot.check_space(self.space, "offspring.intensity")
        if self.mutation.space != self.space:
            raise ConfigurationError("mutation kernel is defined on a different trait space")
        for name, fn in (("b_bar", self.birth), ("d_bar", self.death)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, max(0.0, fn.range_bounds(self.space)[1]))
        if self.c_bar is None:
            object.__setattr__(self, "c_bar",
                               max(0.0, self.competition.range_bounds(self.space)[1]))
        if self.kappa_bound is None:
            object.__setattr__(self, "kappa_bound", self.offspring.mean_bound(self.space))
        mean_hi = self.offspring.mean_bound(self.space)
        if not math.isfinite(mean_hi) or mean_hi > self.kappa_bound * (1 + 1e-12):
            raise ConfigurationError("offspring mean exceeds the declared bound kappa_bound")

    @property
    def c_const(self) -> float | None:
        return self.competition.constant_value

    def encoded(self) -> tuple:
        return (self.birth.encoded, self.death.encoded, self.mutation_prob.encoded,
                self.competition.encoded, self.mutation.encoded, self.offspring.encoded)

    def validate(self, n_probe: int = 10_000, seed: int = 0) -> None:
        """Probe random traits and raise :class:`KernelBoundError` on any violation."""
        rng = np.random.default_rng(seed)
        X = self.space.probe_points(n_probe, rng)
        errors = []
        for name, fn, bound in (("birth", self.birth, self.b_bar),
                                ("death", self.death, self.d_bar)):
            v = np.atleast_1d(fn(X))
            if np.any(v < 0) or np.any(~np.isfinite(v)):
                errors.append(f"{name} rate is negative or non-finite on a probed trait")
            if np.any(v > bound * (1 + 1e-12)):
                errors.append(f"{name} rate {v.max()!r} exceeds declared bound {bound!r}")
        pv = np.atleast_1d(self.mutation_prob(X))
        if np.any(pv < 0) or np.any(pv > 1):
            errors.append("mutation probability leaves [0,1] on a probed trait")
        m = len(X)
        Y = X[rng.permutation(m)]
        cv = np.concatenate([self.competition.diagonal(X),
                             _pair_values(self.competition, X, Y)])
        if np.any(cv < 0) or np.any(~np.isfinite(cv)):
            errors.append("competition kernel is negative or non-finite on probed pairs")
        if np.any(cv > self.c_bar * (1 + 1e-12)):
            errors.append(f"competition {cv.max()!r} exceeds declared bound {self.c_bar!r}")
        if self.offspring.jackpot is not None:
            jv = _pair_values(self.offspring.jackpot, X, Y)
            if np.any(jv < 0):
                errors.append("jackpot intensity is negative on probed pairs")
        if errors:
            raise KernelBoundError("; ".join(errors))

    def to_config(self) -> dict:
        out = {"K": self.K, "birth": self.birth.to_config(), "death": self.death.to_config(),
               "competition": self.competition.to_config(),
               "mutation_prob": self.mutation_prob.to_config(),
               "mutation": self.mutation.to_config(), "offspring": self.offspring.to_config(),
               "b_bar": self.b_bar, "d_bar": self.d_bar, "c_bar": self.c_bar,
               "kappa_bound": self.kappa_bound}
        return out


def _pair_values(fn: PairFunction, X, Y) -> np.ndarray:
    from .functions import eval_pair_many

    return eval_pair_many(fn.encoded, np.ascontiguousarray(X), np.ascontiguousarray(Y))


def competition_pressure(c: PairFunction, x, pop) -> float:
    """``(1/K) sum_j c(x, x_j)`` over all individuals of ``pop``, self included.

    Products with multiplicities are split error-free and summed with ``math.fsum``,
    so the value equals the correctly rounded sum over individuals in ≼ order.
    """
    X, m = pop.arrays()
    if len(m) == 0:
        return 0.0
    vals = _pair_values(c, np.repeat(_vec(x)[None, :], len(m), axis=0), X)
    return weighted_fsum(m, vals) / pop.K
