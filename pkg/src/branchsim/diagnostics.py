"""Monte Carlo checks of martingale, Laplace, moment and jump-census predictions.

Path functionals are evaluated exactly from the event log: between events every
integrand is constant, so time integrals are finite sums.  The replay core keeps
running sums over the population, updated in O(1) per event for trait-only terms and
in O(#traits) for non-constant competition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from ._numeric import neumaier_add, ols_slope
from .engine import CLONAL, MUTANT, Trajectory
from .functions import PairFunction, eval_pair
from .kernels import KernelSet, beta_stable_pmf, beta_stable_survival, gm1_nb, mean_nb
from .population import TestFunction
from .scaling import MechanismLimit
from .traits import ConfigurationError

Z_THRESHOLD = 3.0


# ---------------------------------------------------------------------------
# replay core
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _replay(ev_t, ev_kind, ev_par, ev_child, ev_k, init_tid, init_m, n_tr, lin, w, phi,
            aux, lam, mu, exp_mode, c_is_const, c_const, C, ttab, t_grid, t_end, K, eps_k):
    """Path ``B(P_t) - B(P_0) - ∫ F ds`` on ``t_grid`` plus auxiliary integrals.

    ``P = (1/K) sum m phi``; ``F = lam sum m lin + mu sum_a sum_b m_a m_b c_ab w_a``,
    multiplied by ``exp(-P)`` and with ``B(P) = exp(-P)`` in exponential mode, and
    ``B(P) = P`` otherwise.  Also returns ``∫ (1/K) sum m aux ds`` and the realised
    squared jumps of the path split at offspring count ``eps_k``.
    """
    m = np.zeros(n_tr, dtype=np.int64)
    for i in range(init_tid.shape[0]):
        m[init_tid[i]] += init_m[i]
    N = 0
    Ls, Lc = 0.0, 0.0
    Ps, Pc = 0.0, 0.0
    Ws, Wc = 0.0, 0.0
    As, Ac = 0.0, 0.0
    for a in range(n_tr):
        if m[a] > 0:
            N += m[a]
            Ls, Lc = neumaier_add(Ls, Lc, m[a] * lin[a])
            Ps, Pc = neumaier_add(Ps, Pc, m[a] * phi[a])
            Ws, Wc = neumaier_add(Ws, Wc, m[a] * w[a])
            As, Ac = neumaier_add(As, Ac, m[a] * aux[a])
    # per-trait pressure sums for non-constant competition
    Qs, Qc = 0.0, 0.0
    if not c_is_const:
        for a in range(n_tr):
            if m[a] > 0:
                acc = 0.0
                for b in range(n_tr):
                    if m[b] > 0:
                        acc += m[b] * eval_pair(C, ttab[a], ttab[b])
                Qs, Qc = neumaier_add(Qs, Qc, m[a] * w[a] * acc)

    n_grid = t_grid.shape[0]
    path = np.zeros(n_grid)
    aux_int = np.zeros(n_grid)
    qv_small = np.zeros(n_grid)
    qv_big = np.zeros(n_grid)
    intF, intFc = 0.0, 0.0
    intA, intAc = 0.0, 0.0
    qs, qb = 0.0, 0.0
    P0 = (Ps + Pc) / K
    B0 = math.exp(-P0) if exp_mode else P0
    t = 0.0
    gi = 0
    n_ev = ev_t.shape[0]
    for e in range(n_ev + 1):
        t_next = ev_t[e] if e < n_ev else math.inf
        if t_next > t_end:
            t_next = math.inf
        P = (Ps + Pc) / K
        if c_is_const:
            Q = c_const * N * (Ws + Wc)
        else:
            Q = Qs + Qc
        F = lam * (Ls + Lc) + mu * Q
        if exp_mode:
            F *= math.exp(-P)
        Bt = math.exp(-P) if exp_mode else P
        A = (As + Ac) / K
        while gi < n_grid and t_grid[gi] < t_next:
            tg = min(t_grid[gi], t_end)
            dt = tg - t if tg > t else 0.0
            path[gi] = Bt - B0 - (intF + intFc + F * dt)
            aux_int[gi] = intA + intAc + A * dt
            qv_small[gi] = qs
            qv_big[gi] = qb
            gi += 1
        if e == n_ev or t_next == math.inf:
            break
        dt = t_next - t
        intF, intFc = neumaier_add(intF, intFc, F * dt)
        intA, intAc = neumaier_add(intA, intAc, A * dt)
        t = t_next
        kind = ev_kind[e]
        if kind == 0 or kind == 1:
            s = ev_child[e]
            k = ev_k[e]
        else:
            s = ev_par[e]
            k = -1
        # competition bookkeeping before the multiplicity change
        if not c_is_const:
            dQ = 0.0
            old = 0.0
            for a in range(n_tr):
                if m[a] > 0:
                    old += m[a] * eval_pair(C, ttab[s], ttab[a])
                    if a != s:
                        cas = eval_pair(C, ttab[a], ttab[s])
                        dQ += m[a] * w[a] * k * cas
            new = old + k * eval_pair(C, ttab[s], ttab[s])
            dQ += w[s] * ((m[s] + k) * new - m[s] * old)
            Qs, Qc = neumaier_add(Qs, Qc, dQ)
        m[s] += k
        N += k
        Ls, Lc = neumaier_add(Ls, Lc, k * lin[s])
        Ps, Pc = neumaier_add(Ps, Pc, k * phi[s])
        Ws, Wc = neumaier_add(Ws, Wc, k * w[s])
        As, Ac = neumaier_add(As, Ac, k * aux[s])
        P_after = (Ps + Pc) / K
        if exp_mode:
            jump = math.exp(-P_after) - math.exp(-P)
        else:
            jump = P_after - P
        if abs(k) >= eps_k:
            qb += jump * jump
        else:
            qs += jump * jump
    return path, aux_int, qv_small, qv_big


# ---------------------------------------------------------------------------
# per-trait coefficients
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _gm1_rows(L, X, H, S):
    # g(x_i, h_ij, exp(-S_ij)) - 1 for stacked quadrature nodes
    n, q = S.shape
    out = np.empty((n, q))
    for i in range(n):
        for j in range(q):
            out[i, j] = gm1_nb(L, X[i], H[i, j], S[i, j])
    return out


@njit(cache=True, nogil=True)
def _mean_rows(L, X, H):
    n, q = H.shape[0], H.shape[1]
    out = np.empty((n, q))
    for i in range(n):
        for j in range(q):
            out[i, j] = mean_nb(L, X[i], H[i, j])
    return out


def _phi_values(phi, X) -> np.ndarray:
    return np.atleast_1d(np.asarray(phi(np.atleast_2d(X)), dtype=float))


def exp_martingale_coefficients(kernels: KernelSet, phi, X) -> tuple[np.ndarray, np.ndarray]:
    """Per-trait ``(lin, w)`` for the exponential functional at system size ``K``.

    ``lin(x) = b(x)[(1-p)(g(x,x,e^{-phi(x)/K}) - 1) + p ∫(g(x,h,e^{-phi(h)/K}) - 1) m(x,dh)]
    + d(x)(e^{phi(x)/K} - 1)`` and ``w(x) = e^{phi(x)/K} - 1``.
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    K = kernels.K
    L = kernels.offspring.encoded
    f = _phi_values(phi, X)
    b = np.atleast_1d(kernels.birth(X))
    d = np.atleast_1d(kernels.death(X))
    p = np.atleast_1d(kernels.mutation_prob(X))
    clonal = _gm1_rows(L, X, X[:, None, :], (f / K)[:, None])[:, 0]
    mut = np.zeros(len(X))
    sel = p > 0
    if np.any(sel):
        nodes, wts = kernels.mutation.quadrature_many(X[sel])
        ph = phi(nodes.reshape(-1, X.shape[1])).reshape(wts.shape)
        g = _gm1_rows(L, X[sel], np.ascontiguousarray(nodes), ph / K)
        mut[sel] = np.sum(wts * g, axis=1)
    lin = b * ((1 - p) * clonal + p * mut) + d * np.expm1(f / K)
    return lin, np.expm1(f / K)


def limit_martingale_coefficients(mech: MechanismLimit, phi: TestFunction, X) -> np.ndarray:
    """Per-trait ``p (A1 phi + A2 phi) - phi (lin_psi - p r)``."""
    X = np.atleast_2d(X)
    if phi.A1 is None:
        phi = mech.attach(phi)
    f = _phi_values(phi, X)
    p = np.atleast_1d(mech.p(X))
    a1 = np.atleast_1d(phi.A1(X))
    a2 = np.atleast_1d(phi.A2(X)) if phi.A2 is not None else 0.0
    r = mech.r_values(X)
    return p * (a1 + a2) - f * (np.atleast_1d(mech.lin(X)) - p * r)


def _require_events(traj: Trajectory):
    if traj.events is None:
        raise ConfigurationError("trajectory has no event log; rerun with record_events=true")
    if traj.atom_offsets is None:
        raise ConfigurationError("trajectory has no per-trait snapshots; set record_atoms")


def _replay_traj(traj: Trajectory, lin, w, phi_v, aux, lam, mu, exp_mode, c: PairFunction,
                 t_grid, eps_k):
    _require_events(traj)
    a, b = traj.atom_offsets[0], traj.atom_offsets[1]
    ev = traj.events
    cc = c.constant_value
    t_end = traj.exit_time if traj.exit == "explosion_cap_hit" else math.inf
    return _replay(ev.t, ev.kind, ev.parent, ev.child, ev.k, traj.atom_tid[a:b],
                   traj.atom_mult[a:b], len(traj.traits), np.ascontiguousarray(lin, float),
                   np.ascontiguousarray(w, float), np.ascontiguousarray(phi_v, float),
                   np.ascontiguousarray(aux, float), float(lam), float(mu), bool(exp_mode),
                   cc is not None, float(cc or 0.0), c.encoded,
                   np.ascontiguousarray(traj.traits), np.asarray(t_grid, dtype=float),
                   float(t_end), float(traj.K), float(eps_k))


def exp_martingale_path(traj: Trajectory, phi, kernels: KernelSet, t_grid) -> np.ndarray:
    """``exp(-<nu_t, phi>) - exp(-<nu_0, phi>) - ∫_0^t (generator of exp(-<nu, phi>)) ds``."""
    X = traj.traits
    lin, w = exp_martingale_coefficients(kernels, phi, X)
    zeros = np.zeros(len(X))
    out = _replay_traj(traj, lin, w, _phi_values(phi, X), zeros, 1.0, 1.0 / kernels.K, True,
                       kernels.competition, t_grid, math.inf)
    return out[0]


def limit_martingale_path(traj: Trajectory, phi: TestFunction, mech: MechanismLimit,
                          t_grid, eps: float = math.inf, aux=None):
    """Limit-mechanism martingale residual along the path; ``aux`` adds auxiliary integrals.

    Returns ``(M_t, ∫<nu_s, aux> ds, small-jump QV, burst QV)`` when ``aux`` is given.
    """
    X = traj.traits
    lin = limit_martingale_coefficients(mech, phi, X)
    f = _phi_values(phi, X)
    av = np.zeros(len(X)) if aux is None else _phi_values(aux, X)
    K = traj.K
    out = _replay_traj(traj, lin, f, f, av, 1.0 / K, -1.0 / K ** 2, False, mech.c, t_grid,
                       eps * K)
    return out if aux is not None else out[0]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MartingaleReport:
    name: str
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    n: int
    threshold: float = Z_THRESHOLD
    bias: np.ndarray | None = None

    @property
    def z(self) -> np.ndarray:
        return np.where(self.se > 0, self.mean / np.where(self.se > 0, self.se, 1.0), 0.0)

    @property
    def z_adjusted(self) -> np.ndarray:
        if self.bias is None:
            return self.z
        s = np.sqrt(self.se ** 2 + self.bias ** 2)
        return np.where(s > 0, self.mean / np.where(s > 0, s, 1.0), 0.0)

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) <= self.threshold))

    @property
    def passed_adjusted(self) -> bool:
        return bool(np.all(np.abs(self.z_adjusted) <= self.threshold))

    def rows(self, K=None) -> list[dict]:
        return [{"check": self.name, "K": K, "t": float(t), "value": float(m), "se": float(s),
                 "z": float(z)} for t, m, s, z in zip(self.times, self.mean, self.se, self.z)]

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        zs = ", ".join(f"t={t:g}: z={z:+.2f}" for t, z in zip(self.times, self.z))
        extra = ""
        if self.bias is not None:
            extra = f"; bias-adjusted {'PASS' if self.passed_adjusted else 'FAIL'}"
        return f"{verdict} {self.name} (R={self.n}): {zs}{extra}"

    def to_dict(self) -> dict:
        return {"check": self.name, "passed": self.passed, "replicates": self.n,
                "times": self.times.tolist(), "mean": self.mean.tolist(),
                "se": self.se.tolist(), "z": self.z.tolist()}


class _Welford:
    """Streaming mean/variance for vectors."""

    def __init__(self, n: int):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    def add(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    @property
    def se(self) -> np.ndarray:
        if self.count < 2:
            return np.full_like(self.mean, math.inf)
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def _report_from(name, times, acc: _Welford, bias=None) -> MartingaleReport:
    if acc.count == 0:
        raise ValueError("no trajectories supplied")
    return MartingaleReport(name, np.asarray(times, float), acc.mean.copy(), acc.se, acc.count,
                            bias=bias)


def exp_martingale_check(trajs: Iterable[Trajectory], phi, kernels: KernelSet,
                         t_grid: Sequence[float], name: str = "exp-martingale"
                         ) -> MartingaleReport:
    acc = _Welford(len(t_grid))
    for tr in trajs:
        acc.add(exp_martingale_path(tr, phi, kernels, t_grid))
    return _report_from(name, t_grid, acc)


def limit_martingale_check(trajs: Iterable[Trajectory], phi: TestFunction,
                           mech: MechanismLimit, t_grid: Sequence[float],
                           bias: Sequence[float] | None = None,
                           name: str = "limit-martingale") -> MartingaleReport:
    """Mean limit-mechanism residual per time; ``bias`` widens the finite-K tolerance."""
    acc = _Welford(len(t_grid))
    for tr in trajs:
        acc.add(limit_martingale_path(tr, phi, mech, t_grid))
    b = None if bias is None else np.abs(np.asarray(bias, dtype=float))
    return _report_from(name, t_grid, acc, b)


def bias_from_sweep(K_list: Sequence[float], means: Sequence[np.ndarray],
                    K_target: float) -> np.ndarray:
    """Extrapolated residual bias at ``K_target`` from a fit ``mean ~ a K^{-1/2}``."""
    K = np.asarray(K_list, dtype=float)
    M = np.atleast_2d(np.asarray(means, dtype=float))
    x = K ** -0.5
    a = (M * x[:, None]).sum(0) / (x * x).sum()
    return np.abs(a) * K_target ** -0.5


@dataclass
class QuadraticVariationReport:
    times: np.ndarray
    mean_M2: np.ndarray
    se_M2: np.ndarray
    continuous: np.ndarray
    continuous_se: np.ndarray
    small_jumps: np.ndarray
    small_se: np.ndarray
    bursts: np.ndarray
    bursts_se: np.ndarray
    realized_total: np.ndarray
    diff_se: np.ndarray
    n: int
    threshold: float = Z_THRESHOLD

    @property
    def predicted(self) -> np.ndarray:
        return self.continuous + self.bursts

    @property
    def z(self) -> np.ndarray:
        return (self.mean_M2 - self.predicted) / self.diff_se

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) <= self.threshold))

    @property
    def consistency_gap(self) -> np.ndarray:
        """``|small + bursts - realised total|``; zero up to rounding by construction."""
        return np.abs(self.small_jumps + self.bursts - self.realized_total)

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        parts = [f"t={t:g}: E[M^2]={m:.4g}±{s:.2g} vs continuous {c:.4g} + bursts {b:.4g}"
                 for t, m, s, c, b in zip(self.times, self.mean_M2, self.se_M2,
                                          self.continuous, self.bursts)]
        return f"{verdict} quadratic-variation (R={self.n}): " + "; ".join(parts)

    def to_dict(self) -> dict:
        return {"check": "quadratic-variation", "passed": self.passed, "replicates": self.n,
                "times": self.times.tolist(), "mean_M2": self.mean_M2.tolist(),
                "continuous": self.continuous.tolist(), "bursts": self.bursts.tolist(),
                "small_jumps": self.small_jumps.tolist(), "z": self.z.tolist()}


def quadratic_variation_check(trajs: Iterable[Trajectory], phi: TestFunction,
                              mech: MechanismLimit, t_grid: Sequence[float],
                              eps: float = 0.1) -> QuadraticVariationReport:
    """E[M_t^2] against the predictable variation of the limit.

    The continuous part ``2 ∫ <nu_s, sigma phi^2 + phi^2 ∫_{u<eps} u^2 Pi(du)> ds`` is
    integrated along each path; bursts ``k/K >= eps`` enter through their realised
    squared jumps, the particle-level stand-in for the large-jump compensator.
    """
    small_levy = mech.levy.second_moment_below(eps) if mech.levy.kind != "none" else 0.0

    def aux(X):
        f = _phi_values(phi, X)
        return (2 * np.atleast_1d(mech.sigma(np.atleast_2d(X))) + small_levy) * f * f

    n = len(t_grid)
    accM2, accC, accS, accB, accT, accD = (_Welford(n) for _ in range(6))
    for tr in trajs:
        M, A, qs, qb = limit_martingale_path(tr, phi, mech, t_grid, eps=eps, aux=aux)
        accM2.add(M * M)
        accC.add(A)
        accS.add(qs)
        accB.add(qb)
        accT.add(qs + qb)
        accD.add(M * M - A - qb)
    return QuadraticVariationReport(np.asarray(t_grid, float), accM2.mean, accM2.se,
                                    accC.mean, accC.se, accS.mean, accS.se, accB.mean,
                                    accB.se, accT.mean, accD.se, accM2.count)


# ---------------------------------------------------------------------------
# jump census
# ---------------------------------------------------------------------------

@dataclass
class CensusReport:
    eps: float
    K: float
    count: int
    mass_time: float
    births: int
    expected_limit: float
    expected_finite: float
    slope: float
    slope_se: float
    oracle_slope: float
    weighted_slope: float
    weighted_oracle_slope: float
    kcap_hits: int
    sizes: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    warning: str = ""
    threshold: float = Z_THRESHOLD

    @property
    def z_limit(self) -> float:
        return (self.count - self.expected_limit) / math.sqrt(max(self.expected_limit, 1e-300))

    @property
    def z_finite(self) -> float:
        return (self.count - self.expected_finite) / math.sqrt(max(self.expected_finite, 1e-300))

    @property
    def intensity(self) -> float:
        return self.count / self.mass_time if self.mass_time > 0 else math.nan

    def summary(self) -> str:
        return (f"jump-census eps={self.eps:g}: {self.count} bursts over mass-time "
                f"{self.mass_time:.4g} (limit expects {self.expected_limit:.4g}, z={self.z_limit:+.2f}; "
                f"finite-K pmf expects {self.expected_finite:.4g}, z={self.z_finite:+.2f}); "
                f"survival slope {self.slope:.3f}±{self.slope_se:.3f} (oracle "
                f"{self.oracle_slope:.3f}); mass-weighted slope {self.weighted_slope:.3f} "
                f"(oracle {self.weighted_oracle_slope:.3f}); kmax hits {self.kcap_hits}"
                + (f"; {self.warning}" if self.warning else ""))

    def to_dict(self) -> dict:
        return {"check": "jump-census", "eps": self.eps, "count": self.count,
                "mass_time": self.mass_time, "expected_limit": self.expected_limit,
                "expected_finite": self.expected_finite, "z_limit": self.z_limit,
                "slope": self.slope, "oracle_slope": self.oracle_slope,
                "weighted_slope": self.weighted_slope, "kcap_hits": self.kcap_hits,
                "warning": self.warning}


def _tail_thresholds(sizes: np.ndarray, eps: float, min_count: int = 10) -> np.ndarray:
    top = np.sort(sizes)[-min_count] if len(sizes) >= min_count else eps
    if top <= eps * 1.0001:
        return np.array([eps])
    return np.exp(np.linspace(math.log(eps), math.log(top), 12))


def _survival_slope(sizes: np.ndarray, us: np.ndarray, weighted: bool):
    if len(us) < 3:
        return math.nan, math.nan
    wts = sizes if weighted else np.ones_like(sizes)
    tot = wts.sum()
    S = np.array([wts[sizes >= u].sum() / tot for u in us])
    keep = S > 0
    slope, _, se = ols_slope(np.log(us[keep]), np.log(S[keep]))
    return slope, se


def jump_census(trajs: Iterable[Trajectory], eps: float, mech: MechanismLimit | None = None,
                kernels: KernelSet | None = None) -> CensusReport:
    """Bursts ``k/K >= eps`` against the Levy tail and the finite-K pmf tail.

    The finite-K expectation is ``∫ K b_K P(k >= eps K) <nu_s, 1> ds`` for trait-free
    rates; the limit expectation is ``Pi([eps, inf))`` times the realised mass-time.
    """
    sizes, mass_time, K, births, kcap = [], 0.0, None, 0, 0
    for tr in trajs:
        if tr.events is None:
            raise ConfigurationError("jump census needs event logs; set record_events")
        K = tr.K
        ev = tr.events
        b = (ev.kind == CLONAL) | (ev.kind == MUTANT)
        births += int(b.sum())
        u = ev.k[b] / tr.K
        sizes.append(u[u >= eps])
        mass_time += tr.stats["mass_time"]
        kcap += tr.stats.get("kcap_hits", 0)
    if K is None:
        raise ValueError("no trajectories supplied")
    sz = np.concatenate(sizes) if sizes else np.zeros(0)
    lim = mech.levy.tail(eps) * mass_time if mech is not None else math.nan
    fin = math.nan
    oracle = math.nan
    w_oracle = math.nan
    law = kernels.offspring if kernels is not None else None
    if kernels is not None and kernels.birth.constant_value is not None:
        bK = kernels.birth.constant_value
        n_eps = math.ceil(eps * K)
        if law.preset == "single":
            p_tail = 1.0 if n_eps <= 1 else 0.0
        elif law.preset == "beta_stable":
            p_tail = float(beta_stable_survival(law.beta, max(n_eps - 1, 1))) if n_eps > 1 \
                else 1.0
        else:
            from .kernels import offspring_pmf

            pm = offspring_pmf(law, [0.0], [0.0], kmax=max(n_eps * 50, 1000))
            p_tail = float(pm[n_eps - 1:].sum()) if n_eps >= 1 else 1.0
        fin = K * bK * p_tail * mass_time
    us = _tail_thresholds(sz, eps)
    slope, slope_se = _survival_slope(sz, us, weighted=False)
    w_slope, _ = _survival_slope(sz, us, weighted=True)
    if law is not None and law.preset == "beta_stable" and len(us) >= 3:
        n = np.ceil(us * K)
        S = beta_stable_survival(law.beta, n - 1)
        oracle, _, _ = ols_slope(np.log(us), np.log(S))
        pm = beta_stable_pmf(law.beta, int(n.max()) + 2)
        kk = np.arange(1, len(pm) + 1)
        cum = np.concatenate([[0.0], np.cumsum(kk * pm)])
        kap = (1 + law.beta) / law.beta
        Sw = np.array([kap - cum[int(v) - 1] for v in n])
        Sw = Sw / (kap - cum[int(n[0]) - 1])
        w_oracle, _, _ = ols_slope(np.log(us), np.log(Sw))
    warn = "no bursts above threshold" if len(sz) == 0 else ""
    return CensusReport(eps, float(K), int(len(sz)), mass_time, births, lim, fin, slope,
                        slope_se, oracle, w_slope, w_oracle, kcap, sz, warn)


# ---------------------------------------------------------------------------
# Laplace functionals and moments
# ---------------------------------------------------------------------------

@dataclass
class LaplaceEstimate:
    K: float
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    n: int

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.clip(self.mean - 1.96 * self.se, 0.0, 1.0)
        hi = np.clip(self.mean + 1.96 * self.se, 0.0, 1.0)
        return lo, hi

    def rows(self) -> list[dict]:
        return [{"check": "laplace", "K": self.K, "t": float(t), "value": float(m),
                 "se": float(s)} for t, m, s in zip(self.times, self.mean, self.se)]


def _mass_at(traj: Trajectory, phi, t_list) -> np.ndarray:
    idx = [_snap_index(traj, t) for t in t_list]
    if isinstance(phi, (int, float)) or (isinstance(phi, TestFunction) and phi.name == "constant"):
        val = float(phi) if isinstance(phi, (int, float)) else phi.params["value"]
        return np.array([traj.snap_N[i] * val / traj.K for i in idx])
    out = []
    for i in idx:
        tid, m = traj.snapshot_atoms(i)
        f = _phi_values(phi, traj.traits[tid]) if len(tid) else np.zeros(0)
        out.append(float(np.dot(m, f)) / traj.K)
    return np.array(out)


def _snap_index(traj: Trajectory, t: float) -> int:
    hits = np.nonzero(np.isclose(traj.snapshot_times, t, rtol=0, atol=1e-12))[0]
    if len(hits) == 0:
        raise ValueError(f"time {t!r} is not a snapshot time of the trajectory")
    return int(hits[0])


def laplace_functional(trajs: Iterable[Trajectory], phi, t_list: Sequence[float]
                       ) -> LaplaceEstimate:
    """Mean and standard error of ``exp(-<nu_t, phi>)`` at each requested time."""
    acc = _Welford(len(t_list))
    K = None
    for tr in trajs:
        K = tr.K
        acc.add(np.exp(-_mass_at(tr, phi, t_list)))
    if K is None:
        raise ValueError("no trajectories supplied")
    return LaplaceEstimate(K, np.asarray(t_list, float), np.clip(acc.mean, 0, 1), acc.se,
                           acc.count)


def cauchy_gaps(estimates: Sequence[LaplaceEstimate]) -> np.ndarray:
    """Successive gaps ``|L_{i+1} - L_i|`` across a K-sweep (per time)."""
    M = np.array([e.mean for e in estimates])
    return np.abs(np.diff(M, axis=0))


@dataclass
class MomentReport:
    K: float
    q: int
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    n: int
    warning: str = ""

    def rows(self) -> list[dict]:
        return [{"check": f"moment-q{self.q}", "K": self.K, "t": float(t), "value": float(m),
                 "se": float(s)} for t, m, s in zip(self.times, self.mean, self.se)]


def moment_estimate(trajs: Iterable[Trajectory], q: int, t_list: Sequence[float],
                    infinite_variance: bool = False) -> MomentReport:
    """``E[sup_{s<=t} <nu_s, 1>^q]`` from the running maximum of the population size."""
    if q < 1:
        raise ValueError("moment order must be >= 1")
    warn = ""
    if q >= 2 and infinite_variance:
        warn = "moments of order >= 2 are infinite in the limit for this preset"
    acc = _Welford(len(t_list))
    K = None
    for tr in trajs:
        K = tr.K
        idx = [_snap_index(tr, t) for t in t_list]
        acc.add((tr.snap_sup[idx] / tr.K) ** q)
    if K is None:
        raise ValueError("no trajectories supplied")
    return MomentReport(K, q, np.asarray(t_list, float), acc.mean.copy(), acc.se, acc.count,
                        warn)


@dataclass
class TrendReport:
    K_list: list[float]
    means: list[float]
    ses: list[float]
    slope: float
    slope_se: float

    @property
    def ci(self) -> tuple[float, float]:
        return self.slope - 1.96 * self.slope_se, self.slope + 1.96 * self.slope_se

    @property
    def contains_zero(self) -> bool:
        lo, hi = self.ci
        return lo <= 0.0 <= hi

    @property
    def not_increasing(self) -> bool:
        return self.ci[0] <= 0.0

    def summary(self) -> str:
        lo, hi = self.ci
        return (f"moment trend over K={self.K_list}: slope per decade {self.slope:+.4g} "
                f"(95% CI [{lo:+.4g}, {hi:+.4g}])")


def moment_trend(reports: Sequence[MomentReport], t_index: int = -1) -> TrendReport:
    """Weighted slope of the moment estimate against ``log10 K``."""
    K = [r.K for r in reports]
    m = [float(r.mean[t_index]) for r in reports]
    s = [float(r.se[t_index]) for r in reports]
    slope, _, se = ols_slope(np.log10(K), m, sigma=s)
    return TrendReport(K, m, s, slope, se)


# ---------------------------------------------------------------------------
# finite-space mean flow
# ---------------------------------------------------------------------------

def mean_flow_matrix(kernels: KernelSet) -> np.ndarray:
    """Matrix ``G`` with ``d/dt E m = G^T E m`` (rows: parent label) for c ≡ 0."""
    sp = kernels.space
    if not sp.is_finite:
        raise ConfigurationError("mean flow needs a finite trait space")
    if kernels.c_const != 0.0:
        raise ConfigurationError("mean flow oracle assumes no competition")
    n = sp.n_labels
    X = np.arange(n, dtype=float).reshape(-1, 1)
    b = np.atleast_1d(kernels.birth(X))
    d = np.atleast_1d(kernels.death(X))
    p = np.atleast_1d(kernels.mutation_prob(X))
    L = kernels.offspring.encoded
    G = np.zeros((n, n))
    for i in range(n):
        row = kernels.mutation.transition_row(X[i])
        G[i, i] += (1 - p[i]) * b[i] * mean_nb(L, X[i], X[i]) - d[i]
        for j in range(n):
            G[i, j] += p[i] * b[i] * row[j] * mean_nb(L, X[i], X[j])
    return G


@dataclass
class MeanFlowReport:
    times: np.ndarray
    labels: tuple
    mean: np.ndarray
    se: np.ndarray
    oracle: np.ndarray
    n: int
    threshold: float = Z_THRESHOLD

    @property
    def z(self) -> np.ndarray:
        return np.where(self.se > 0, (self.mean - self.oracle) / np.where(self.se > 0, self.se, 1),
                        0.0)

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) <= self.threshold))

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} mean-flow (R={self.n}): max |z| = {np.max(np.abs(self.z)):.2f}"


def mean_flow_check(trajs: Iterable[Trajectory], kernels: KernelSet,
                    t_list: Sequence[float]) -> MeanFlowReport:
    """Per-label mean masses against ``exp(G^T t) m_0`` (matrix exponential)."""
    from scipy.linalg import expm

    G = mean_flow_matrix(kernels)
    n = kernels.space.n_labels
    acc = _Welford(n * len(t_list))
    m0 = None
    for tr in trajs:
        vals = np.zeros((len(t_list), n))
        for a, t in enumerate(t_list):
            tid, m = tr.snapshot_atoms(_snap_index(tr, t))
            vals[a, tid] = m / tr.K
        if m0 is None:
            tid, m = tr.snapshot_atoms(0)
            m0 = np.zeros(n)
            m0[tid] = m / tr.K
        acc.add(vals.ravel())
    if m0 is None:
        raise ValueError("no trajectories supplied")
    oracle = np.array([expm(G.T * t) @ m0 for t in t_list])
    return MeanFlowReport(np.asarray(t_list, float), kernels.space.labels,
                          acc.mean.reshape(len(t_list), n), acc.se.reshape(len(t_list), n),
                          oracle, acc.count)
