"""K-indexed model families, their branching mechanisms and convergence checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from ._numeric import gl_interval, ols_slope
from .functions import PairFunction, TraitFunction
from .kernels import (KernelSet, MutationKernel, OffspringLaw, beta_stable_survival, gm1_nb,
                      mean_nb)
from .population import TestFunction
from .traits import ConfigurationError, TraitSpace

FAMILIES = ("single_offspring", "beta_stable", "jackpot", "deterministic")


# ---------------------------------------------------------------------------
# mutation scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MutationScaling:
    """Rule producing the mutation kernel at system size ``K``.

    ``gaussian``: std ``theta * K**-std_exponent``, shift ``gamma * K**-shift_exponent``.
    ``pareto``: index ``beta``, offsets divided by ``K**(eta / beta)``.
    ``two_trait``: switch probabilities ``q``, divided by ``b_K`` when ``normalize``.
    ``matrix``: a fixed transition matrix.  ``none``: no movement.
    """

    preset: str = "none"
    theta: float = 0.0
    std_exponent: float = 0.0
    gamma: float = 0.0
    shift_exponent: float = 0.0
    beta: float = 1.5
    eta: float = 1.0
    q: tuple[float, ...] = ()
    normalize: bool = False
    matrix: tuple[tuple[float, ...], ...] = ()

    def kernel(self, space: TraitSpace, K: float, birth_K: TraitFunction) -> MutationKernel:
        if self.preset == "none":
            return MutationKernel.none(space)
        if self.preset == "gaussian":
            return MutationKernel.gaussian(space, self.theta * K ** -self.std_exponent,
                                           self.gamma * K ** -self.shift_exponent)
        if self.preset == "pareto":
            return MutationKernel.pareto(space, self.beta, K ** (self.eta / self.beta))
        if self.preset == "two_trait":
            q = list(self.q)
            if self.normalize:
                b = birth_K(np.array([[0.0], [1.0]]))
                q = [min(1.0, qi / bi) if bi > 0 else 0.0 for qi, bi in zip(q, b)]
            return MutationKernel.two_trait(space, q)
        if self.preset == "matrix":
            return MutationKernel.transition_matrix(space, self.matrix)
        raise ConfigurationError(f"unknown mutation scaling preset {self.preset!r}")

    def to_config(self) -> dict:
        keys = {"none": (), "gaussian": ("theta", "std_exponent", "gamma", "shift_exponent"),
                "pareto": ("beta", "eta"), "two_trait": ("q", "normalize"),
                "matrix": ("matrix",)}[self.preset]
        out = {"preset": self.preset}
        for k in keys:
            v = getattr(self, k)
            out[k] = [list(r) for r in v] if k == "matrix" else (list(v) if k == "q" else v)
        return out

    @classmethod
    def from_config(cls, spec: dict | None) -> "MutationScaling":
        if not spec:
            return cls()
        spec = dict(spec)
        if "q" in spec:
            spec["q"] = tuple(float(v) for v in spec["q"])
        if "matrix" in spec:
            spec["matrix"] = tuple(tuple(float(v) for v in r) for r in spec["matrix"])
        return cls(**spec)


# ---------------------------------------------------------------------------
# Levy measures and the limit mechanism
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevyMeasure:
    """Jump intensity ``Pi(du)`` on (0, inf), identical at every trait.

    ``stable``: density ``amplitude * u**(-2 - beta)``.  ``tabulated``: density given on
    an increasing grid, log-log interpolated and zero outside the grid.
    """

    kind: str = "none"
    beta: float = 0.5
    amplitude: float = 0.0
    grid: tuple[float, ...] = ()
    density_values: tuple[float, ...] = ()

    def density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "none":
            return np.zeros_like(u)
        if self.kind == "stable":
            return self.amplitude * u ** (-2.0 - self.beta)
        g = np.log(self.grid)
        v = np.log(self.density_values)
        lu = np.log(u)
        out = np.exp(np.interp(lu, g, v))
        return np.where((lu >= g[0]) & (lu <= g[-1]), out, 0.0)

    def tail(self, eps: float) -> float:
        """``Pi([eps, inf))``."""
        if self.kind == "none":
            return 0.0
        if self.kind == "stable":
            return self.amplitude * eps ** (-1.0 - self.beta) / (1.0 + self.beta)
        return self._quad(lambda u: np.ones_like(u), eps, self.grid[-1])

    def second_moment_below(self, eps: float) -> float:
        """``∫_(0, eps) u^2 Pi(du)``."""
        if self.kind == "none":
            return 0.0
        if self.kind == "stable":
            return self.amplitude * eps ** (1.0 - self.beta) / (1.0 - self.beta)
        return self._quad(lambda u: u * u, self.grid[0], min(eps, self.grid[-1]))

    def moment_bound(self) -> float:
        """``∫ (u ∧ u^2) Pi(du)``."""
        if self.kind == "none":
            return 0.0
        if self.kind == "stable":
            return self.amplitude * (1.0 / (1.0 - self.beta) + 1.0 / self.beta)
        lo, hi = self.grid[0], self.grid[-1]
        a = self._quad(lambda u: u * u, lo, min(1.0, hi)) if lo < 1 else 0.0
        b = self._quad(lambda u: u, max(1.0, lo), hi) if hi > 1 else 0.0
        return a + b

    def _quad(self, f, a, b, panels: int = 64) -> float:
        if b <= a:
            return 0.0
        y, w = _log_panels(math.log(a), math.log(b), panels)
        u = np.exp(y)
        return float(np.sum(w * u * f(u) * self.density(u)))

    def to_config(self) -> dict:
        if self.kind == "none":
            return {"kind": "none"}
        if self.kind == "stable":
            return {"kind": "stable", "beta": self.beta, "amplitude": self.amplitude}
        return {"kind": "tabulated", "grid": list(self.grid),
                "density": list(self.density_values)}


def _log_panels(a: float, b: float, panels: int, n: int = 16):
    edges = np.linspace(a, b, panels + 1)
    ys, ws = [], []
    for l, r in zip(edges, edges[1:]):
        y, w = gl_interval(l, r, n)
        ys.append(y)
        ws.append(w)
    return np.concatenate(ys), np.concatenate(ws)


def stable_amplitude(beta: float, gamma: float) -> float:
    """Density constant ``C`` with ``∫(e^{-zu}-1+zu) C u^{-2-beta} du = gamma z^{1+beta}/beta``."""
    return gamma / (beta * special.gamma(-1.0 - beta))


class QuadratureError(RuntimeError):
    pass


def levy_integral(levy: LevyMeasure, z: float, rtol: float = 1e-8, panels: int = 32,
                  max_panels: int = 1 << 14) -> float:
    """``∫ (e^{-zu} - 1 + zu) Pi(du)`` by composite Gauss-Legendre on a log grid.

    Panels double until successive values agree to ``rtol``; the stable tails below
    ``1e-4/z`` and above ``50/z`` are added in closed form.
    """
    if levy.kind == "none" or z == 0.0:
        return 0.0
    if levy.kind == "stable":
        ua, ub = 1e-4 / z, 50.0 / z
    else:
        ua, ub = levy.grid[0], levy.grid[-1]

    def body(npan):
        y, w = _log_panels(math.log(ua), math.log(ub), npan)
        u = np.exp(y)
        f = np.expm1(-z * u) + z * u
        return float(np.sum(w * u * f * levy.density(u)))

    prev = body(panels)
    while True:
        panels *= 2
        cur = body(panels)
        if abs(cur - prev) <= rtol * abs(cur):
            break
        if panels > max_panels:
            raise QuadratureError(f"log-grid quadrature did not converge: {prev!r} vs {cur!r}")
        prev = cur
    if levy.kind == "stable":
        C, b = levy.amplitude, levy.beta
        lower = C * (z * z * ua ** (1 - b) / (2 * (1 - b)) - z ** 3 * ua ** (2 - b) / (6 * (2 - b)))
        upper = C * (z * ub ** (-b) / b - ub ** (-1 - b) / (1 + b))
        cur += lower + upper
    return cur


@dataclass(frozen=True)
class MechanismLimit:
    """Limit ingredients: ``psi(x,z) = lin(x) z + sigma(x) z^2 + ∫(e^{-zu}-1+zu) Pi(du)``.

    ``lin`` is stored with the sign it has inside ``psi``; for the single-offspring
    family it equals minus the family's ``b``.  ``A1``/``A2`` map a test function to
    its generator image (callable on trait arrays); ``r`` is the mean-dependence drift.
    """

    space: TraitSpace
    lin: TraitFunction
    sigma: TraitFunction
    levy: LevyMeasure
    p: TraitFunction
    c: PairFunction
    r: TraitFunction | None = field(default_factory=lambda: TraitFunction.const(0.0))
    A1: Callable[[TestFunction], Callable] | None = None
    A2: Callable[[TestFunction], Callable] | None = None
    description: str = ""

    def psi(self, x, z: float) -> float:
        if z < 0:
            raise ValueError("psi is defined for z >= 0")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        base = self.lin(x) * z + self.sigma(x) * z * z
        if self.levy.kind == "stable":
            C, b = self.levy.amplitude, self.levy.beta
            return base + C * special.gamma(-1.0 - b) * z ** (1.0 + b)
        return base + levy_integral(self.levy, z)

    def attach(self, phi: TestFunction) -> TestFunction:
        """Copy of ``phi`` carrying ``A1 phi`` and ``A2 phi``."""
        zero = lambda X: np.zeros(len(np.atleast_2d(X)))  # noqa: E731
        a1 = self.A1(phi) if self.A1 is not None else zero
        a2 = self.A2(phi) if self.A2 is not None else zero
        return phi.with_generators(a1, a2)

    def r_values(self, X) -> np.ndarray:
        if self.r is None:
            raise ConfigurationError("this mechanism has no closed-form drift r")
        return np.atleast_1d(self.r(np.atleast_2d(X)))


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingFamily:
    """K-indexed model: ``kernels(K)`` yields the kernel set at system size ``K``.

    ``params`` hold the family's trait functions: ``b``, ``sigma`` (single_offspring,
    jackpot), ``gamma``, ``d0`` (beta_stable), ``b``, ``d`` (deterministic).
    """

    preset: str
    space: TraitSpace
    params: dict
    competition: PairFunction = field(default_factory=lambda: PairFunction.const(0.0))
    mutation_prob: TraitFunction = field(default_factory=lambda: TraitFunction.const(0.0))
    mutation: MutationScaling = field(default_factory=MutationScaling)
    beta: float = 1.0
    kmax: int = 10 ** 9
    jackpot: PairFunction | None = None
    jackpot_exponent: float = 0.0
    kappa: float = 1.0

    def __post_init__(self):
        if self.preset not in FAMILIES:
            raise ConfigurationError(f"unknown scaling family {self.preset!r}")
        if self.preset == "beta_stable" and not (0.0 < self.beta <= 1.0):
            raise ConfigurationError("β must lie in (0,1]")
        if self.preset == "jackpot" and self.jackpot is None:
            raise ConfigurationError("jackpot family needs an intensity")
        if self.preset == "deterministic" and self.kappa < 1.0:
            raise ConfigurationError("deterministic family needs mean offspring kappa >= 1")
        need = {"single_offspring": ("b", "sigma"), "jackpot": ("b", "sigma"),
                "beta_stable": ("gamma", "d0"), "deterministic": ("b", "d")}[self.preset]
        fixed = {}
        for k in need:
            v = self.params.get(k, 0.0)
            fixed[k] = v if isinstance(v, TraitFunction) else TraitFunction.const(float(v))
        object.__setattr__(self, "params", fixed)

    # constructors ---------------------------------------------------------
    @classmethod
    def single_offspring(cls, space, b=0.0, sigma=1.0, **kw) -> "ScalingFamily":
        return cls("single_offspring", space, {"b": b, "sigma": sigma}, **kw)

    @classmethod
    def beta_stable(cls, space, beta, gamma=1.0, d0=0.0, **kw) -> "ScalingFamily":
        return cls("beta_stable", space, {"gamma": gamma, "d0": d0}, beta=float(beta), **kw)

    @classmethod
    def jackpot_family(cls, space, intensity, b=0.0, sigma=1.0, **kw) -> "ScalingFamily":
        if not isinstance(intensity, PairFunction):
            intensity = PairFunction.const(float(intensity))
        return cls("jackpot", space, {"b": b, "sigma": sigma}, jackpot=intensity, **kw)

    @classmethod
    def deterministic(cls, space, b=1.0, d=0.0, kappa=1.0, **kw) -> "ScalingFamily":
        return cls("deterministic", space, {"b": b, "d": d}, kappa=float(kappa), **kw)

    # per-K ingredients ----------------------------------------------------
    def rates(self, K: float) -> tuple[TraitFunction, TraitFunction]:
        P = self.params
        if self.preset in ("single_offspring", "jackpot"):
            return P["sigma"].scaled(K) + P["b"], P["sigma"].scaled(K)
        if self.preset == "beta_stable":
            bk = P["gamma"].scaled(K ** self.beta)
            kap = (1.0 + self.beta) / self.beta
            return bk, bk.scaled(kap) + P["d0"]
        return P["b"], P["d"]

    def offspring(self, K: float) -> OffspringLaw:
        if self.preset == "single_offspring":
            return OffspringLaw.single()
        if self.preset == "beta_stable":
            return OffspringLaw.beta_stable(self.beta, self.kmax)
        if self.preset == "jackpot":
            return OffspringLaw.jackpot_law(self.jackpot.scaled(K ** -self.jackpot_exponent))
        if self.kappa == 1.0:
            return OffspringLaw.single()
        return OffspringLaw.jackpot_law(PairFunction.const(self.kappa - 1.0))

    def kernels(self, K: float, **bounds) -> KernelSet:
        b, d = self.rates(K)
        return KernelSet(self.space, K, b, d, self.competition, self.mutation_prob,
                         self.mutation.kernel(self.space, K, b), self.offspring(K), **bounds)

    def growth(self) -> tuple[float, TraitFunction]:
        """Leading order ``b_K ~ K**e * lead``."""
        P = self.params
        if self.preset in ("single_offspring", "jackpot"):
            return 1.0, P["sigma"]
        if self.preset == "beta_stable":
            return self.beta, P["gamma"]
        return 0.0, P["b"]

    # mechanisms -------------------------------------------------------------
    def psi_K(self, K: float, x, z: float) -> float:
        """``b_K(x) (g(x, x, e^{-z}) - 1) + d_K(x) (e^z - 1)``."""
        if z < 0:
            raise ValueError("psi_K is defined for z >= 0")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        b, d = self.rates(K)
        L = self.offspring(K).encoded
        return float(b(x) * gm1_nb(L, x, x, float(z)) + d(x) * math.expm1(z))

    def rescaled_psi(self, K: float, x, z: float) -> float:
        return K * self.psi_K(K, x, z / K)

    def drift_gap(self, K: float, grid) -> float:
        """``sup_x |kappa(x,x) b_K(x) - d_K(x)|`` over ``grid``."""
        b, d = self.rates(K)
        L = self.offspring(K).encoded
        X = np.atleast_2d(grid)
        kap = np.array([mean_nb(L, x, x) for x in X])
        return float(np.max(np.abs(kap * b(X) - d(X))))

    def limit(self) -> MechanismLimit:
        P = self.params
        zero = TraitFunction.const(0.0)
        if self.preset == "single_offspring":
            lin, sig, levy = P["b"].scaled(-1.0), P["sigma"], LevyMeasure()
        elif self.preset == "jackpot":
            grid = self.space.grid(9)
            diag = self.jackpot.diagonal(grid)
            if self.jackpot_exponent <= 0 and np.any(np.abs(diag) > 0):
                raise ConfigurationError("jackpot intensity must vanish on the diagonal for "
                                         "the rescaled mechanism to converge")
            lin, sig, levy = P["b"].scaled(-1.0), P["sigma"], LevyMeasure()
        elif self.preset == "beta_stable":
            if self.beta >= 1.0:
                lin, sig, levy = P["d0"], P["gamma"].scaled(3.0), LevyMeasure()
            else:
                g = P["gamma"].constant_value
                if g is None:
                    raise ConfigurationError("beta_stable limit needs a constant gamma")
                lin, sig = P["d0"], zero
                levy = LevyMeasure("stable", self.beta, stable_amplitude(self.beta, g))
        else:
            lin = P["d"] + P["b"].scaled(-self.kappa)
            sig, levy = zero, LevyMeasure()
        A1, A2, r = self._mutation_limits()
        return MechanismLimit(self.space, lin, sig, levy, self.mutation_prob, self.competition,
                              r, A1, A2, description=self.preset)

    def _mutation_limits(self):
        e, lead = self.growth()
        kap = self.kappa if self.preset == "deterministic" else 1.0
        ms = self.mutation
        zero_r = TraitFunction.const(0.0)
        if self.preset == "jackpot":
            jack = self.jackpot
            dist_only = all(t.kind == "distance" for t in jack.terms)
            if ms.preset == "gaussian" and dist_only and ms.gamma == 0.0:
                amp = sum(t.coef for t in jack.terms)
                ex = e - self.jackpot_exponent - ms.std_exponent
                r = lead.scaled(math.sqrt(2 / math.pi) * amp * ms.theta) if abs(ex) < 1e-12 \
                    else (zero_r if ex < 0 else None)
            else:
                r = None
        else:
            r = zero_r

        if ms.preset == "none":
            return None, None, r
        if ms.preset == "gaussian":
            e2 = 2 * ms.std_exponent
            e1 = ms.shift_exponent
            if e2 < e - 1e-12 or (ms.gamma != 0 and e1 < e - 1e-12):
                if e == 0 and ms.std_exponent == 0 and ms.shift_exponent == 0:
                    return self._jump_generator(), None, r
                raise ConfigurationError("gaussian mutation scaling has no finite limit")
            diff = lead.scaled(kap * ms.theta ** 2) if abs(e2 - e) < 1e-12 else None
            drift = lead.scaled(kap * ms.gamma) if (ms.gamma and abs(e1 - e) < 1e-12) else None

            def A1(phi: TestFunction):
                if phi.second_derivative is None and diff is not None:
                    raise ConfigurationError("test function lacks a second derivative")

                def f(X):
                    X = np.atleast_2d(X)
                    out = np.zeros(len(X))
                    if diff is not None:
                        out += 0.5 * diff(X) * phi.second_derivative(X)
                    if drift is not None:
                        out += drift(X) * _first_derivative(phi, X)
                    return out
                return f
            return A1, None, r
        if ms.preset == "pareto":
            if abs(ms.eta - e) > 1e-12:
                raise ConfigurationError("pareto mutation needs b_K of order K**eta")

            def A1(phi: TestFunction):
                def f(X):
                    X = np.atleast_2d(X)
                    return np.array([lead(x) * kap * 0.5 * ms.beta
                                     * fractional_laplacian(phi, float(x[0]), ms.beta)
                                     for x in X])
                return f
            return A1, None, r
        if ms.preset == "two_trait":
            if ms.normalize:
                q = np.asarray(ms.q, dtype=float)
            elif e == 0:
                return self._jump_generator(), None, r
            else:
                raise ConfigurationError("two_trait scaling needs normalize=true when b_K grows")

            def A1(phi: TestFunction):
                vals = phi(np.array([[0.0], [1.0]]))

                def f(X):
                    lab = np.atleast_2d(X)[:, 0].astype(int)
                    other = 1 - lab
                    return kap * q[lab] * (vals[other] - vals[lab])
                return f
            return A1, None, r
        return self._jump_generator(), None, r

    def _jump_generator(self):
        """Exact bounded generator ``b kappa ∫(phi(h) - phi(x)) m(x, dh)`` for K-free rates."""
        b, _ = self.rates(1.0)
        kern = self.mutation.kernel(self.space, 1.0, b)
        kap = self.kappa if self.preset == "deterministic" else 1.0

        def A1(phi: TestFunction):
            def f(X):
                X = np.atleast_2d(X)
                Eh = mutation_expectations(kern, X, phi)
                return b(X) * kap * (Eh - phi(X))
            return f
        return A1

    def to_config(self) -> dict:
        out = {"preset": self.preset,
               "params": {k: v.to_config() for k, v in self.params.items()},
               "competition": self.competition.to_config(),
               "mutation_prob": self.mutation_prob.to_config(),
               "mutation": self.mutation.to_config()}
        if self.preset == "beta_stable":
            out["beta"] = self.beta
            out["kmax"] = self.kmax
        if self.preset == "jackpot":
            out["intensity"] = self.jackpot.to_config()
            out["intensity_exponent"] = self.jackpot_exponent
        if self.preset == "deterministic":
            out["kappa"] = self.kappa
        return out


def _first_derivative(phi: TestFunction, X, h: float = 1e-5) -> np.ndarray:
    Xp, Xm = X.copy(), X.copy()
    Xp[:, 0] += h
    Xm[:, 0] -= h
    return (phi(Xp) - phi(Xm)) / (2 * h)


def fractional_laplacian(phi: TestFunction, x: float, beta: float) -> float:
    """``∫_0^∞ (phi(x+u) + phi(x-u) - 2 phi(x)) u^{-1-beta} du``."""
    f0 = float(phi(np.array([[x]]))[0])

    def g(u):
        v = phi(np.array([[x + u], [x - u]]))
        return (v[0] + v[1] - 2 * f0) * u ** (-1.0 - beta)

    a, _ = integrate.quad(g, 0.0, 1.0, limit=200)
    b, _ = integrate.quad(g, 1.0, np.inf, limit=200)
    return a + b


def mutation_expectations(kernel: MutationKernel, X, f: Callable) -> np.ndarray:
    """``∫ f(h) m(x, dh)`` for each row ``x`` of ``X``."""
    X = np.atleast_2d(X)
    out = np.empty(len(X))
    for i, x in enumerate(X):
        out[i] = kernel.expectation(x, f)
    return out


# ---------------------------------------------------------------------------
# validation reports
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    family: str
    K_list: list[float]
    errors: list[float]
    curvature: list[float]
    exponent: float
    tolerance: float
    passed: bool
    drift_gaps: list[float] = field(default_factory=list)
    grid_note: str = ""

    def rows(self) -> list[dict]:
        return [{"K": K, "sup_error": e, "fitted_exponent": self.exponent, "curvature": c,
                 "drift_gap": g}
                for K, e, c, g in zip(self.K_list, self.errors, self.curvature,
                                      self.drift_gaps or [math.nan] * len(self.K_list))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows()[0]))
            w.writeheader()
            for row in self.rows():
                w.writerow({k: repr(float(v)) for k, v in row.items()})

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        errs = ", ".join(f"e({K:g})={e:.3e}" for K, e in zip(self.K_list, self.errors))
        return (f"{verdict} validate_convergence[{self.family}]: {errs}; "
                f"fitted exponent {self.exponent:.3f}; tolerance {self.tolerance:g}")


def validate_convergence(family: ScalingFamily, mech: MechanismLimit | None = None,
                         K_list: Sequence[float] = (1e2, 1e3, 1e4), trait_grid=None,
                         z_grid=None, tolerance: float = 0.05) -> ConvergenceReport:
    """Sup-norm distance between ``K psi^K(x, z/K)`` and ``psi(x, z)`` over the grids.

    The exponent is the least-squares slope of ``-log e(K)`` against ``log K``;
    curvature is the largest second difference of ``K psi^K(x, z/K)`` in ``z``.
    """
    K_list = [float(K) for K in K_list]
    if any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ValueError("K_list must be increasing")
    mech = mech or family.limit()
    X = np.atleast_2d(trait_grid) if trait_grid is not None else family.space.grid(5)
    Z = np.asarray(z_grid if z_grid is not None else np.linspace(0.0, 5.0, 64), dtype=float)
    limit = np.array([[mech.psi(x, z) for z in Z] for x in X])
    errors, curv, gaps = [], [], []
    dz = Z[1] - Z[0] if len(Z) > 1 else 1.0
    for K in K_list:
        vals = np.array([[family.rescaled_psi(K, x, z) for z in Z] for x in X])
        errors.append(float(np.max(np.abs(vals - limit))))
        c = np.max(np.abs(np.diff(vals, 2, axis=1))) / dz ** 2 if len(Z) > 2 else 0.0
        curv.append(float(c))
        gaps.append(family.drift_gap(K, X))
    e = np.asarray(errors)
    if len(K_list) >= 2 and np.all(e > 0):
        slope, _, _ = ols_slope(np.log(K_list), -np.log(e))
    else:
        slope = math.nan
    decreasing = bool(np.all(np.diff(e) < 0)) if len(e) > 1 else True
    passed = decreasing and errors[-1] <= tolerance
    note = f"{len(X)} traits x {len(Z)} z-points on [{Z[0]:g}, {Z[-1]:g}]"
    return ConvergenceReport(family.preset, K_list, errors, curv, float(slope), tolerance,
                             passed, gaps, note)


@dataclass
class GeneratorReport:
    K_list: list[float]
    A1_errors: list[float]
    A2_errors: list[float]
    r_errors: list[float]

    def summary(self) -> str:
        parts = [f"K={K:g}: A1 {a:.3e}, A2 {b:.3e}, r {c:.3e}"
                 for K, a, b, c in zip(self.K_list, self.A1_errors, self.A2_errors,
                                       self.r_errors)]
        return "validate_mutation_generator: " + "; ".join(parts)


def mutation_drifts(family: ScalingFamily, K: float, phi: TestFunction, X):
    """K-level mutation terms ``(A1^K phi, A2^K phi, r^K)`` at each trait in ``X``."""
    b, _ = family.rates(K)
    kern = family.mutation.kernel(family.space, K, b)
    L = family.offspring(K).encoded
    X = np.atleast_2d(X)
    a1, a2, rr = [], [], []
    for x in X:
        bx = float(b(x))
        fx = float(phi(x[None, :])[0])
        kxx = mean_nb(L, x, x)
        nodes, w = kern.quadrature(x)
        ph = phi(nodes)
        kh = np.array([mean_nb(L, x, h) for h in nodes])
        a1.append(bx * kxx * float(np.sum(w * (ph - fx))))
        a2.append(bx * float(np.sum(w * (ph - fx) * (kh - kxx))))
        rr.append(bx * float(np.sum(w * (kh - kxx))))
    return np.array(a1), np.array(a2), np.array(rr)


def validate_mutation_generator(family: ScalingFamily, mech: MechanismLimit | None,
                                phi: TestFunction, trait_grid,
                                K_list: Sequence[float] = (1e2, 1e3, 1e4)) -> GeneratorReport:
    mech = mech or family.limit()
    phi = mech.attach(phi) if phi.A1 is None else phi
    if phi.A1 is None:
        raise ConfigurationError("test function has no attached generator image")
    X = np.atleast_2d(trait_grid)
    A1 = np.atleast_1d(phi.A1(X))
    A2 = np.atleast_1d(phi.A2(X)) if phi.A2 is not None else np.zeros(len(X))
    r = mech.r_values(X) if mech.r is not None else None
    e1, e2, er = [], [], []
    for K in K_list:
        a1, a2, rr = mutation_drifts(family, K, phi, X)
        e1.append(float(np.max(np.abs(a1 - A1))))
        e2.append(float(np.max(np.abs(a2 - A2))))
        er.append(float(np.max(np.abs(rr - r))) if r is not None else math.nan)
    return GeneratorReport([float(K) for K in K_list], e1, e2, er)


def beta_stable_burst_tail(beta: float, K: float, eps: float) -> float:
    """Rate of bursts ``k/K >= eps`` per individual birth event, from the pmf tail."""
    n = math.ceil(eps * K) - 1
    return float(beta_stable_survival(beta, max(n, 1)))
