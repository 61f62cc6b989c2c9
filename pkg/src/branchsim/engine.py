"""Exact event-driven simulation by thinning against global rate bounds.

Each proposal round draws an exponential waiting time at the bound rate
``N (b_bar + d_bar + c_bar N / K)``, picks an individual uniformly and a proposal type,
and accepts it with the ratio of true to bound rate.  The compiled core keeps one slot
per distinct trait with cached rates and competition pressure, plus a Fenwick tree
over multiplicities for uniform individual selection.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numba import njit

from ._numeric import neumaier_add
from .functions import eval_pair, eval_trait
from .kernels import (L_BETA, KernelSet, competition_pressure, sample_k_nb, sample_mutant_nb)
from .population import REFRESH_EVERY, Population
from .traits import ConfigurationError, TraitSpace

CLONAL, MUTANT, DEATH_NATURAL, DEATH_COMPETITION = 0, 1, 2, 3
EVENT_KINDS = ("clonal_birth", "mutant_birth", "death", "death")
EXIT_HORIZON, EXIT_EXPLOSION = 0, 1
EXIT_NAMES = ("reached_horizon", "explosion_cap_hit")


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based generator for replicate ``index`` of ``seed``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and substream index must be nonnegative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed),
                                                                       spawn_key=(int(index),))))


# ---------------------------------------------------------------------------
# compiled core
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _grow1(a, n):
    out = np.zeros(n, dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def _grow2(a, n):
    out = np.zeros((n, a.shape[1]), dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def _fw_build(mult, cap):
    tree = np.zeros(cap + 1, dtype=np.int64)
    for i in range(cap):
        j = i + 1
        tree[j] += mult[i]
        p = j + (j & -j)
        if p <= cap:
            tree[p] += tree[j]
    return tree


@njit(cache=True, nogil=True)
def _fw_add(tree, cap, i, delta):
    j = i + 1
    while j <= cap:
        tree[j] += delta
        j += j & -j


@njit(cache=True, nogil=True)
def _fw_find(tree, cap, r):
    # slot containing the individual of 0-based rank r
    pos = 0
    step = 1
    while step * 2 <= cap:
        step *= 2
    while step > 0:
        nxt = pos + step
        if nxt <= cap and tree[nxt] <= r:
            pos = nxt
            r -= tree[nxt]
        step //= 2
    return pos


@njit(cache=True, nogil=True)
def _simulate(enc, finite, n_labels, K, b_bar, d_bar, c_bar, c_is_const, c_const,
              init_X, init_m, T, snap_t, cap_n, gen, record_events, record_atoms,
              refresh_every):
    B, D, P, C, M, L = enc
    lcode = L[0]
    kmax = L[2]
    dim = init_X.shape[1]

    # trait table and slots
    if finite:
        n_tr = n_labels
        ttab = np.zeros((n_labels, dim))
        for i in range(n_labels):
            ttab[i, 0] = float(i)
        scap = 1
        while scap < n_labels:
            scap *= 2
    else:
        n_tr = 0
        ttab = np.zeros((max(16, 2 * init_X.shape[0]), dim))
        scap = 16
        while scap < 2 * init_X.shape[0]:
            scap *= 2
    mult = np.zeros(scap, dtype=np.int64)
    tid = np.zeros(scap, dtype=np.int64)
    br = np.zeros(scap)
    dr = np.zeros(scap)
    pr = np.zeros(scap)
    press = np.zeros(scap)
    pressc = np.zeros(scap)
    free = np.zeros(scap, dtype=np.int64)
    n_free = 0
    hi_slot = 0
    bound_violations = 0

    if finite:
        hi_slot = n_labels
        for i in range(n_labels):
            tid[i] = i
            x = ttab[i]
            br[i] = eval_trait(B, x)
            dr[i] = eval_trait(D, x)
            pr[i] = eval_trait(P, x)
            if br[i] > b_bar or dr[i] > d_bar:
                bound_violations += 1
        for a in range(init_X.shape[0]):
            mult[int(init_X[a, 0])] += init_m[a]
    else:
        for a in range(init_X.shape[0]):
            if init_m[a] <= 0:
                continue
            tid[hi_slot] = n_tr
            ttab[n_tr] = init_X[a]
            x = ttab[n_tr]
            br[hi_slot] = eval_trait(B, x)
            dr[hi_slot] = eval_trait(D, x)
            pr[hi_slot] = eval_trait(P, x)
            if br[hi_slot] > b_bar or dr[hi_slot] > d_bar:
                bound_violations += 1
            mult[hi_slot] = init_m[a]
            n_tr += 1
            hi_slot += 1
    N = 0
    for s in range(hi_slot):
        N += mult[s]
    tree = _fw_build(mult, scap)

    # initial pressures
    if not c_is_const:
        for s in range(hi_slot):
            if mult[s] == 0 and not finite:
                continue
            acc = 0.0
            cc = 0.0
            xs = ttab[tid[s]]
            for j in range(hi_slot):
                if finite or mult[j] > 0:
                    acc, cc = neumaier_add(acc, cc, mult[j] * eval_pair(C, xs, ttab[tid[j]]) / K)
            press[s] = acc
            pressc[s] = cc

    # outputs
    n_snap = snap_t.shape[0]
    snN = np.zeros(n_snap, dtype=np.int64)
    snSup = np.zeros(n_snap, dtype=np.int64)
    snArea = np.zeros(n_snap)
    sa_off = np.zeros(n_snap + 1, dtype=np.int64)
    sa_tid = np.zeros(64, dtype=np.int64)
    sa_m = np.zeros(64, dtype=np.int64)
    n_sa = 0
    ev_cap = 1024 if record_events else 1
    ev_t = np.zeros(ev_cap)
    ev_kind = np.zeros(ev_cap, dtype=np.int64)
    ev_par = np.zeros(ev_cap, dtype=np.int64)
    ev_child = np.zeros(ev_cap, dtype=np.int64)
    ev_k = np.zeros(ev_cap, dtype=np.int64)
    n_ev = 0

    t = 0.0
    area = 0.0
    sup_n = N
    n_events = 0
    n_props = 0
    kcap_hits = 0
    since_refresh = 0
    exit_flag = 0
    exit_time = T
    si = 0

    while True:
        if N >= cap_n:
            exit_flag = 1
            exit_time = t
            break
        if N == 0:
            break
        Dbar = d_bar + c_bar * N / K
        R = N * (b_bar + Dbar)
        t_new = t + gen.standard_exponential() / R
        # flush snapshots in [t, t_new): the state is constant there
        while si < n_snap and snap_t[si] < t_new and snap_t[si] <= T:
            snN[si] = N
            snSup[si] = sup_n
            snArea[si] = area + N * (snap_t[si] - t)
            if record_atoms:
                for s in range(hi_slot):
                    if mult[s] > 0:
                        if n_sa >= sa_tid.shape[0]:
                            sa_tid = _grow1(sa_tid, 2 * n_sa)
                            sa_m = _grow1(sa_m, 2 * n_sa)
                        sa_tid[n_sa] = tid[s]
                        sa_m[n_sa] = mult[s]
                        n_sa += 1
            sa_off[si + 1] = n_sa
            si += 1
        if t_new > T:
            area += N * (T - t)
            t = T
            break
        area += N * (t_new - t)
        t = t_new
        n_props += 1

        s = _fw_find(tree, scap, int(gen.random() * N))
        v = gen.random() * (b_bar + Dbar)
        if v < b_bar:
            if v >= br[s]:
                continue
            # birth
            x = ttab[tid[s]]
            p = pr[s]
            mutate = p >= 1.0 or (p > 0.0 and gen.random() < p)
            if mutate:
                h = sample_mutant_nb(M, x, gen)
                k = sample_k_nb(L, x, h, gen)
                if finite:
                    tgt = int(h[0])
                else:
                    if n_free > 0:
                        n_free -= 1
                        tgt = free[n_free]
                    else:
                        if hi_slot >= scap:
                            ncap = 2 * scap
                            mult = _grow1(mult, ncap)
                            tid = _grow1(tid, ncap)
                            br = _grow1(br, ncap)
                            dr = _grow1(dr, ncap)
                            pr = _grow1(pr, ncap)
                            press = _grow1(press, ncap)
                            pressc = _grow1(pressc, ncap)
                            free = _grow1(free, ncap)
                            scap = ncap
                            tree = _fw_build(mult, scap)
                        tgt = hi_slot
                        hi_slot += 1
                    if n_tr >= ttab.shape[0]:
                        ttab = _grow2(ttab, 2 * n_tr)
                    ttab[n_tr] = h
                    tid[tgt] = n_tr
                    n_tr += 1
                    xh = ttab[tid[tgt]]
                    br[tgt] = eval_trait(B, xh)
                    dr[tgt] = eval_trait(D, xh)
                    pr[tgt] = eval_trait(P, xh)
                    if br[tgt] > b_bar or dr[tgt] > d_bar:
                        bound_violations += 1
                    press[tgt] = 0.0
                    pressc[tgt] = 0.0
                    if not c_is_const:
                        acc = 0.0
                        cc = 0.0
                        for j in range(hi_slot):
                            if finite or mult[j] > 0:
                                acc, cc = neumaier_add(
                                    acc, cc, mult[j] * eval_pair(C, xh, ttab[tid[j]]) / K)
                        press[tgt] = acc
                        pressc[tgt] = cc
                kind = MUTANT
            else:
                k = sample_k_nb(L, x, x, gen)
                tgt = s
                kind = CLONAL
            if lcode == L_BETA and k >= kmax:
                kcap_hits += 1
            mult[tgt] += k
            N += k
            _fw_add(tree, scap, tgt, k)
            if not c_is_const:
                xt = ttab[tid[tgt]]
                for j in range(hi_slot):
                    if finite or mult[j] > 0:
                        press[j], pressc[j] = neumaier_add(
                            press[j], pressc[j], k * eval_pair(C, ttab[tid[j]], xt) / K)
            if N > sup_n:
                sup_n = N
            if record_events:
                if n_ev >= ev_cap:
                    ev_cap *= 2
                    ev_t = _grow1(ev_t, ev_cap)
                    ev_kind = _grow1(ev_kind, ev_cap)
                    ev_par = _grow1(ev_par, ev_cap)
                    ev_child = _grow1(ev_child, ev_cap)
                    ev_k = _grow1(ev_k, ev_cap)
                ev_t[n_ev] = t
                ev_kind[n_ev] = kind
                ev_par[n_ev] = tid[s]
                ev_child[n_ev] = tid[tgt]
                ev_k[n_ev] = k
                n_ev += 1
        else:
            w = v - b_bar
            if w < dr[s]:
                kind = DEATH_NATURAL
            else:
                if c_is_const:
                    pz = c_const * N / K
                else:
                    pz = press[s] + pressc[s]
                if w < dr[s] + pz:
                    kind = DEATH_COMPETITION
                else:
                    continue
            mult[s] -= 1
            N -= 1
            _fw_add(tree, scap, s, -1)
            if not c_is_const:
                xs = ttab[tid[s]]
                for j in range(hi_slot):
                    if finite or mult[j] > 0:
                        press[j], pressc[j] = neumaier_add(
                            press[j], pressc[j], -eval_pair(C, ttab[tid[j]], xs) / K)
            if mult[s] == 0 and not finite:
                press[s] = 0.0
                pressc[s] = 0.0
                free[n_free] = s
                n_free += 1
            if record_events:
                if n_ev >= ev_cap:
                    ev_cap *= 2
                    ev_t = _grow1(ev_t, ev_cap)
                    ev_kind = _grow1(ev_kind, ev_cap)
                    ev_par = _grow1(ev_par, ev_cap)
                    ev_child = _grow1(ev_child, ev_cap)
                    ev_k = _grow1(ev_k, ev_cap)
                ev_t[n_ev] = t
                ev_kind[n_ev] = kind
                ev_par[n_ev] = tid[s]
                ev_child[n_ev] = tid[s]
                ev_k[n_ev] = 1
                n_ev += 1
        n_events += 1
        since_refresh += 1
        if since_refresh >= refresh_every and not c_is_const:
            since_refresh = 0
            for a in range(hi_slot):
                if mult[a] == 0 and not finite:
                    continue
                acc = 0.0
                cc = 0.0
                xa = ttab[tid[a]]
                for j in range(hi_slot):
                    if finite or mult[j] > 0:
                        acc, cc = neumaier_add(acc, cc, mult[j] * eval_pair(C, xa, ttab[tid[j]]) / K)
                press[a] = acc
                pressc[a] = cc

    # remaining snapshots see the final (possibly stopped or extinct) state
    end = exit_time if exit_flag == 1 else T
    while si < n_snap:
        snN[si] = N
        snSup[si] = sup_n
        snArea[si] = area + N * max(0.0, min(snap_t[si], end) - t)
        if record_atoms:
            for s in range(hi_slot):
                if mult[s] > 0:
                    if n_sa >= sa_tid.shape[0]:
                        sa_tid = _grow1(sa_tid, 2 * n_sa + 1)
                        sa_m = _grow1(sa_m, 2 * n_sa + 1)
                    sa_tid[n_sa] = tid[s]
                    sa_m[n_sa] = mult[s]
                    n_sa += 1
        sa_off[si + 1] = n_sa
        si += 1
    stats = np.array([area, float(sup_n), float(n_events), float(n_props), float(kcap_hits),
                      float(exit_flag), exit_time, float(N), float(bound_violations)])
    return (ttab[:n_tr].copy(), snN, snSup, snArea, sa_off, sa_tid[:n_sa].copy(),
            sa_m[:n_sa].copy(), ev_t[:n_ev].copy(), ev_kind[:n_ev].copy(),
            ev_par[:n_ev].copy(), ev_child[:n_ev].copy(), ev_k[:n_ev].copy(), stats)


# ---------------------------------------------------------------------------
# Python-facing types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    parent_trait: np.ndarray
    mutant_trait: np.ndarray | None = None
    offspring_count: int = 1
    cause: str | None = None

    def __eq__(self, other):
        if not isinstance(other, Event):
            return NotImplemented
        return (self.time == other.time and self.kind == other.kind
                and self.offspring_count == other.offspring_count and self.cause == other.cause
                and np.array_equal(self.parent_trait, other.parent_trait)
                and ((self.mutant_trait is None and other.mutant_trait is None)
                     or np.array_equal(self.mutant_trait, other.mutant_trait)))


@dataclass
class EventLog:
    """Columnar event record; ``parent``/``child`` index the trajectory trait table."""

    t: np.ndarray
    kind: np.ndarray
    parent: np.ndarray
    child: np.ndarray
    k: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True)
class SimulationConfig:
    kernels: KernelSet
    initial: tuple[tuple, ...]
    horizon: float
    snapshot_times: tuple[float, ...] = ()
    explosion_cap: int = 10 ** 7
    seed: int = 0
    record_events: bool = False
    record_atoms: bool = True
    refresh_every: int = REFRESH_EVERY

    def __post_init__(self):
        sp = self.kernels.space
        init = tuple((tuple(float(v) for v in sp.as_trait(x)), int(k)) for x, k in self.initial)
        object.__setattr__(self, "initial", init)
        if any(k < 0 for _, k in init):
            raise ConfigurationError("initial counts must be nonnegative")
        for x, _ in init:
            if not sp.contains(np.array(x)):
                raise ConfigurationError(f"initial trait {x!r} lies outside the trait space")
        if not (self.horizon >= 0 and math.isfinite(self.horizon)):
            raise ConfigurationError("horizon must be a finite nonnegative time")
        st = tuple(float(s) for s in self.snapshot_times)
        if not st:
            st = (0.0, float(self.horizon)) if self.horizon > 0 else (0.0,)
        if any(b < a for a, b in zip(st, st[1:])) or st[0] < 0 or st[-1] > self.horizon:
            raise ConfigurationError("snapshot times must be sorted and within [0, horizon]")
        if st[0] != 0.0:
            st = (0.0,) + st
        object.__setattr__(self, "snapshot_times", st)
        if self.explosion_cap <= self.initial_count:
            raise ConfigurationError("explosion cap must exceed the initial population size")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    @property
    def initial_count(self) -> int:
        return sum(k for _, k in self.initial)

    def initial_population(self) -> Population:
        kern = self.kernels
        return Population(kern.space, kern.K, kern.competition, self.initial)

    def to_config(self) -> dict:
        sp = self.kernels.space
        return {"space": sp.to_config(), "kernels": self.kernels.to_config(),
                "initial": [[sp.describe(np.array(x)), k] for x, k in self.initial],
                "horizon": self.horizon, "snapshot_times": list(self.snapshot_times),
                "explosion_cap": self.explosion_cap, "seed": self.seed,
                "record_events": self.record_events, "record_atoms": self.record_atoms}

    def digest(self) -> str:
        text = json.dumps(self.to_config(), sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Trajectory:
    """Piecewise-constant path: snapshot table, optional event log, exit status."""

    config_hash: str
    space: TraitSpace
    K: float
    traits: np.ndarray
    snapshot_times: np.ndarray
    snap_N: np.ndarray
    snap_sup: np.ndarray
    snap_area: np.ndarray
    atom_offsets: np.ndarray | None
    atom_tid: np.ndarray | None
    atom_mult: np.ndarray | None
    events: EventLog | None
    exit: str
    exit_time: float
    stats: dict = field(default_factory=dict)
    replicate: int = 0

    @property
    def snap_mass(self) -> np.ndarray:
        return self.snap_N / self.K

    def snapshot_atoms(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Trait ids and multiplicities of snapshot ``i``, sorted in ≼ order."""
        if self.atom_offsets is None:
            raise ValueError("trajectory was recorded without per-trait snapshots")
        a, b = self.atom_offsets[i], self.atom_offsets[i + 1]
        tid, m = self.atom_tid[a:b], self.atom_mult[a:b]
        order = _order(self.traits[tid])
        return tid[order], m[order]

    def snapshot(self, i: int, competition=None) -> Population:
        tid, m = self.snapshot_atoms(i)
        return Population(self.space, self.K, competition,
                          [(self.traits[t], int(c)) for t, c in zip(tid, m)])

    def event_list(self) -> list[Event]:
        if self.events is None:
            raise ValueError("trajectory was recorded without events; set record_events")
        ev = self.events
        out = []
        for i in range(len(ev)):
            kd = int(ev.kind[i])
            par = self.traits[ev.parent[i]].copy()
            if kd == MUTANT:
                out.append(Event(float(ev.t[i]), "mutant_birth", par,
                                 self.traits[ev.child[i]].copy(), int(ev.k[i])))
            elif kd == CLONAL:
                out.append(Event(float(ev.t[i]), "clonal_birth", par, None, int(ev.k[i])))
            else:
                out.append(Event(float(ev.t[i]), "death", par, None, 1,
                                 "natural" if kd == DEATH_NATURAL else "competition"))
        return out


def _order(X: np.ndarray) -> np.ndarray:
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(X.T[::-1])


def _merge_initial(config: SimulationConfig) -> tuple[np.ndarray, np.ndarray]:
    merged: dict[tuple, int] = {}
    for x, k in config.initial:
        merged[x] = merged.get(x, 0) + k
    keys = sorted(merged)
    d = config.kernels.space.dimension
    X = np.array(keys, dtype=float).reshape(-1, d)
    m = np.array([merged[k] for k in keys], dtype=np.int64)
    return X, m


def simulate(config: SimulationConfig, rng: np.random.Generator | None = None,
             replicate: int = 0) -> Trajectory:
    """Run one trajectory to the horizon or the explosion cap."""
    if rng is None:
        rng = substream(config.seed, replicate)
    kern = config.kernels
    sp = kern.space
    X, m = _merge_initial(config)
    c_const = kern.c_const
    snap = np.array(config.snapshot_times, dtype=float)
    out = _simulate(kern.encoded(), sp.is_finite, sp.n_labels if sp.is_finite else 0,
                    float(kern.K), float(kern.b_bar), float(kern.d_bar), float(kern.c_bar),
                    c_const is not None, float(c_const or 0.0), X, m, float(config.horizon),
                    snap, int(config.explosion_cap), rng, bool(config.record_events),
                    bool(config.record_atoms), int(config.refresh_every))
    (ttab, snN, snSup, snArea, sa_off, sa_tid, sa_m, ev_t, ev_kind, ev_par, ev_child, ev_k,
     st) = out
    stats = {"mass_time": float(st[0] / kern.K), "sup_N": int(st[1]), "events": int(st[2]),
             "proposals": int(st[3]), "kcap_hits": int(st[4]), "final_N": int(st[7]),
             "bound_violations": int(st[8])}
    events = EventLog(ev_t, ev_kind, ev_par, ev_child, ev_k) if config.record_events else None
    rec = config.record_atoms
    return Trajectory(config.digest(), sp, kern.K, ttab, snap, snN, snSup, snArea,
                      sa_off if rec else None, sa_tid if rec else None, sa_m if rec else None,
                      events, EXIT_NAMES[int(st[5])], float(st[6]), stats, replicate)


def iter_replicates(config: SimulationConfig, indices: Sequence[int] | range,
                    workers: int = 1) -> Iterator[Trajectory]:
    """Yield trajectories for the given replicate indices, in index order."""
    indices = list(indices)
    if workers <= 1:
        for i in indices:
            yield simulate(config, replicate=i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda i: simulate(config, replicate=i), indices)


def run_replicates(config: SimulationConfig, R: int, workers: int = 1) -> list[Trajectory]:
    """``R`` independent trajectories on substreams ``0..R-1`` of the config seed."""
    if R < 1:
        raise ValueError("need at least one replicate")
    return list(iter_replicates(config, range(R), workers))


# ---------------------------------------------------------------------------
# pure-Python reference step
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepResult:
    time: float
    event: Event | None
    proposals: int


def step(state: Population, clock: float, kernels: KernelSet, rng: np.random.Generator,
         horizon: float = math.inf) -> StepResult:
    """Advance ``state`` in place through thinning rounds until one event is accepted.

    Rejected rounds only advance the clock.  Returns the event (``None`` if the
    horizon is reached first or the population is extinct) and the new clock.
    """
    from .kernels import sample_mutant, sample_offspring_count

    kern = kernels
    n_props = 0
    while True:
        N = state.N
        if N == 0:
            return StepResult(horizon if math.isfinite(horizon) else clock, None, n_props)
        Dbar = kern.d_bar + kern.c_bar * N / kern.K
        R = N * (kern.b_bar + Dbar)
        t_new = clock + rng.standard_exponential() / R
        if t_new > horizon:
            return StepResult(horizon, None, n_props)
        clock = t_new
        n_props += 1
        x = state.canonical_index(int(rng.random() * N) + 1)
        v = rng.random() * (kern.b_bar + Dbar)
        if v < kern.b_bar:
            if v >= kern.birth(x):
                continue
            p = kern.mutation_prob(x)
            if p >= 1.0 or (p > 0.0 and rng.random() < p):
                h = sample_mutant(kern.mutation, x, rng)
                k = sample_offspring_count(kern.offspring, x, h, rng)
                state.insert(h, k)
                return StepResult(clock, Event(clock, "mutant_birth", x, h, k), n_props)
            k = sample_offspring_count(kern.offspring, x, x, rng)
            state.insert(x, k)
            return StepResult(clock, Event(clock, "clonal_birth", x, None, k), n_props)
        w = v - kern.b_bar
        d = kern.death(x)
        if w < d:
            cause = "natural"
        elif w < d + competition_pressure(kern.competition, x, state):
            cause = "competition"
        else:
            continue
        state.remove_trait(x)
        return StepResult(clock, Event(clock, "death", x, None, 1, cause), n_props)
