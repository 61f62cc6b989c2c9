import math
import os
import secrets

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from branchsim.engine import (SimulationConfig, Trajectory, iter_replicates, run_replicates,
                              simulate, step, substream)
from branchsim.functions import PairFunction, TraitFunction
from branchsim.kernels import KernelSet, MutationKernel, OffspringLaw
from branchsim.population import Population
from branchsim.traits import ConfigurationError, TraitSpace

SP = TraitSpace.interval(0.0, 1.0)
C = TraitFunction.const


def kernels(b=0.0, d=0.0, c=0.0, p=0.0, K=1.0, offspring=None, mutation=None, space=SP, **kw):
    c = c if isinstance(c, PairFunction) else PairFunction.const(c)
    b = b if isinstance(b, TraitFunction) else C(b)
    d = d if isinstance(d, TraitFunction) else C(d)
    return KernelSet(space, K, b, d, c, C(p), mutation or MutationKernel.none(space),
                     offspring or OffspringLaw.single(), **kw)


def config(ks, n0=1, x0=(0.5,), T=1.0, **kw):
    return SimulationConfig(ks, ((list(x0), n0),), horizon=T, **kw)


def replay_events(tr: Trajectory) -> list[dict]:
    """Counts per trait id after each snapshot time, rebuilt from the event log."""
    counts: dict[int, int] = {}
    a, b = tr.atom_offsets[0], tr.atom_offsets[1]
    for tid, m in zip(tr.atom_tid[a:b], tr.atom_mult[a:b]):
        counts[int(tid)] = int(m)
    ev = tr.events
    out, j = [], 0
    for t in tr.snapshot_times:
        while j < len(ev) and ev.t[j] <= t:
            if ev.kind[j] <= 1:
                counts[int(ev.child[j])] = counts.get(int(ev.child[j]), 0) + int(ev.k[j])
            else:
                counts[int(ev.parent[j])] -= 1
            j += 1
        out.append({k: v for k, v in counts.items() if v > 0})
    return out


# rng ---------------------------------------------------------------------------------

def test_substream_reproducible_and_distinct():
    a = substream(5, 3).random(8)
    assert np.array_equal(a, substream(5, 3).random(8))
    assert not np.array_equal(a, substream(5, 4).random(8))
    assert not np.array_equal(a, substream(6, 3).random(8))
    with pytest.raises(ValueError):
        substream(-1, 0)


def test_no_os_entropy_needed(monkeypatch):
    cfg = config(kernels(b=1.0, d=1.0, c=0.5, K=10.0), n0=10, seed=3)
    first = simulate(cfg)  # compile outside the patch; JIT compilation may use tempfile names

    def boom(*_a, **_k):
        raise AssertionError("OS entropy requested")

    monkeypatch.setattr(os, "urandom", boom)
    monkeypatch.setattr(secrets, "randbits", boom)
    monkeypatch.setattr(secrets, "token_bytes", boom)
    real = np.random.SeedSequence

    def seeded_only(entropy=None, **kw):
        if entropy is None:
            raise AssertionError("unseeded SeedSequence")
        return real(entropy, **kw)

    monkeypatch.setattr(np.random, "SeedSequence", seeded_only)
    tr = simulate(cfg)
    assert tr.stats["events"] > 0
    assert np.array_equal(tr.snap_N, first.snap_N)


# configuration -------------------------------------------------------------------------

def test_config_validation():
    ks = kernels(d=1.0)
    with pytest.raises(ConfigurationError):
        config(ks, T=-1.0)
    with pytest.raises(ConfigurationError):
        config(ks, snapshot_times=(0.5, 0.2))
    with pytest.raises(ConfigurationError):
        config(ks, snapshot_times=(0.5, 2.0))
    with pytest.raises(ConfigurationError):
        config(ks, n0=5, explosion_cap=5)
    with pytest.raises(ConfigurationError):
        config(ks, x0=(1.5,))
    with pytest.raises(ConfigurationError):
        config(ks, seed=-1)
    with pytest.raises(ConfigurationError):
        SimulationConfig(ks, (([0.5], -1),), horizon=1.0)


def test_zero_seed_and_large_seed_accepted():
    ks = kernels(d=1.0)
    assert config(ks, seed=0).seed == 0
    assert config(ks, seed=2 ** 64 - 1).seed == 2 ** 64 - 1


# simulate --------------------------------------------------------------------------------

def test_zero_horizon_initial_only():
    tr = simulate(config(kernels(b=1.0, d=1.0), n0=4, T=0.0, record_events=True))
    assert list(tr.snapshot_times) == [0.0]
    assert list(tr.snap_N) == [4]
    assert len(tr.events) == 0


@given(st.integers(0, 10 ** 6))
def test_pure_death_monotone(seed):
    tr = simulate(config(kernels(d=1.0, c=0.3, K=5.0), n0=20, T=2.0,
                         snapshot_times=np.linspace(0, 2, 9), seed=seed))
    assert np.all(np.diff(tr.snap_N) <= 0)


def test_pure_death_lifetime_mean():
    d = 2.0
    trs = run_replicates(config(kernels(d=d), T=100.0, record_events=True, seed=11), 10 ** 5)
    tau = np.array([tr.events.t[0] for tr in trs])
    se = tau.std(ddof=1) / math.sqrt(len(tau))
    assert abs(tau.mean() - 1 / d) <= 3 * se


def test_pure_death_survival_dkw():
    d, R = 1.0, 10 ** 4
    trs = run_replicates(config(kernels(d=d), T=10.0, record_events=True, seed=2), R)
    tau = np.sort([tr.events.t[0] for tr in trs])
    emp_hi = np.arange(1, R + 1) / R
    emp_lo = np.arange(0, R) / R
    cdf = 1 - np.exp(-d * tau)
    dist = max(np.max(np.abs(emp_hi - cdf)), np.max(np.abs(emp_lo - cdf)))
    band = math.sqrt(math.log(2 / 1e-3) / (2 * R))
    assert dist <= band


def test_yule_mean():
    b, R = 1.0, 20000
    trs = run_replicates(config(kernels(b=b), T=1.0, seed=4, record_atoms=False), R)
    n = np.array([tr.snap_N[-1] for tr in trs], dtype=float)
    se = n.std(ddof=1) / math.sqrt(R)
    assert abs(n.mean() - math.exp(b)) <= 3 * se


def test_critical_branching_is_martingale():
    K = 50.0
    ks = kernels(b=K, d=K, K=K)
    trs = run_replicates(config(ks, n0=50, T=1.0, seed=9, record_atoms=False), 4000)
    m = np.array([tr.snap_mass[-1] for tr in trs])
    assert np.all(m >= 0)
    assert abs(m.mean() - 1.0) <= 3 * m.std(ddof=1) / math.sqrt(len(m))


def test_mean_field_competition_has_no_rejections():
    tr = simulate(config(kernels(c=2.0, K=10.0), n0=200, T=5.0, seed=1))
    assert tr.stats["events"] == tr.stats["proposals"] > 0
    assert tr.stats["bound_violations"] == 0


def test_acceptance_ratios_within_bounds():
    b = TraitFunction.const(1.0) + TraitFunction.gaussian(1.0, [0.5], 0.2)
    ks = kernels(b=b, d=TraitFunction.linear([0.5]), c=PairFunction.gaussian(1.0, 0.3),
                 p=0.3, K=20.0, mutation=MutationKernel.gaussian(SP, 0.1))
    trs = run_replicates(config(ks, n0=20, T=2.0, seed=6), 20)
    assert all(tr.stats["bound_violations"] == 0 for tr in trs)
    assert sum(tr.stats["proposals"] - tr.stats["events"] for tr in trs) > 0


def test_event_times_increase_and_snapshots_reconstruct():
    ks = kernels(b=1.2, d=0.4, c=PairFunction.gaussian(1.0, 0.3), p=0.2, K=10.0,
                 mutation=MutationKernel.gaussian(SP, 0.05),
                 offspring=OffspringLaw.jackpot_law(0.5))
    cfg = config(ks, n0=10, T=2.0, snapshot_times=np.linspace(0, 2, 11), record_events=True,
                 seed=13)
    for tr in run_replicates(cfg, 5):
        assert np.all(np.diff(tr.events.t) > 0)
        rebuilt = replay_events(tr)
        for i, want in enumerate(rebuilt):
            tid, m = tr.snapshot_atoms(i)
            assert dict(zip(tid.tolist(), m.tolist())) == want
            assert sum(want.values()) == tr.snap_N[i]


def test_mutant_burst_shares_one_trait():
    ks = kernels(b=1.0, p=1.0, K=1.0, mutation=MutationKernel.gaussian(SP, 0.1),
                 offspring=OffspringLaw.jackpot_law(3.0))
    tr = simulate(config(ks, T=1.0, record_events=True, seed=0))
    evs = tr.event_list()
    assert evs and all(e.kind == "mutant_birth" for e in evs)
    for e in evs:
        assert e.mutant_trait is not None and e.offspring_count >= 1
    assert tr.snapshot(len(tr.snapshot_times) - 1).N == tr.snap_N[-1]


def test_explosion_guard_normal_exit():
    ks = kernels(b=3.0, offspring=OffspringLaw.jackpot_law(2.0))
    tr = simulate(config(ks, n0=5, T=10.0, explosion_cap=200, seed=0))
    assert tr.exit == "explosion_cap_hit"
    assert 0 < tr.exit_time < 10.0
    assert tr.stats["final_N"] >= 200


def test_explosion_guard_frequency_decreases():
    ks = kernels(b=1.0, d=0.2, offspring=OffspringLaw.beta_stable(0.5), K=1.0)
    freqs = []
    for n in (50, 100, 200):
        trs = run_replicates(config(ks, n0=2, T=1.0, explosion_cap=n, seed=5,
                                    record_atoms=False), 2000)
        freqs.append(np.mean([tr.exit == "explosion_cap_hit" for tr in trs]))
    assert freqs[0] > freqs[1] > freqs[2]


def test_mean_offspring_drift_regression():
    # kappa b - d = 2 * 1 - 1.5 = 0.5
    ks = kernels(b=1.0, d=1.5, K=20.0, offspring=OffspringLaw.jackpot_law(1.0))
    ts = np.linspace(0, 2, 9)
    trs = run_replicates(config(ks, n0=20, T=2.0, snapshot_times=ts, seed=8,
                                record_atoms=False), 4000)
    M = np.array([tr.snap_mass for tr in trs])
    mean = M.mean(axis=0)
    slope = np.polyfit(ts, np.log(mean), 1)[0]
    se = M.std(axis=0, ddof=1)[-1] / math.sqrt(len(M)) / mean[-1]
    assert abs(slope - 0.5) <= 3 * se + 0.02


# determinism ----------------------------------------------------------------------------

def _same(a: Trajectory, b: Trajectory) -> bool:
    return (np.array_equal(a.snap_N, b.snap_N) and np.array_equal(a.traits, b.traits)
            and np.array_equal(a.events.t, b.events.t)
            and np.array_equal(a.atom_mult, b.atom_mult) and a.stats == b.stats)


def test_r1_equals_simulate_substream0():
    cfg = config(kernels(b=1.0, d=1.0, c=0.5, K=10.0), n0=10, record_events=True, seed=42)
    a = run_replicates(cfg, 1)[0]
    b = simulate(cfg, substream(42, 0))
    assert _same(a, b)


def test_worker_count_invariance():
    ks = kernels(b=1.0, d=0.5, c=PairFunction.gaussian(1.0, 0.3), p=0.1, K=20.0,
                 mutation=MutationKernel.gaussian(SP, 0.05))
    cfg = config(ks, n0=20, record_events=True, seed=7)
    one = run_replicates(cfg, 12, workers=1)
    four = run_replicates(cfg, 12, workers=4)
    assert all(_same(a, b) for a, b in zip(one, four))
    picked = list(iter_replicates(cfg, [3, 7], workers=2))
    assert _same(picked[0], one[3]) and _same(picked[1], one[7])


def test_config_digest_stable():
    ks = kernels(b=1.0, d=1.0)
    assert config(ks, seed=1).digest() == config(ks, seed=1).digest()
    assert config(ks, seed=1).digest() != config(ks, seed=2).digest()


# python step -------------------------------------------------------------------------------

def test_step_empty_population():
    res = step(Population(SP, 1.0), 0.0, kernels(d=1.0), np.random.default_rng(0), horizon=3.0)
    assert res.event is None and res.time == 3.0


def test_step_pure_death():
    pop = Population(SP, 1.0, None, [([0.5], 1)])
    res = step(pop, 0.0, kernels(d=2.0), np.random.default_rng(0))
    assert res.event.kind == "death" and res.event.cause == "natural"
    assert pop.N == 0 and res.proposals == 1


def test_step_competition_death_and_horizon():
    ks = kernels(c=1.0, K=1.0)
    pop = Population(SP, 1.0, ks.competition, [([0.5], 3)])
    res = step(pop, 0.0, ks, np.random.default_rng(1))
    assert res.event.cause == "competition" and pop.N == 2
    res = step(pop, 0.0, ks, np.random.default_rng(1), horizon=1e-9)
    assert res.event is None and pop.N == 2


def test_step_yule_matches_compiled_law():
    ks = kernels(b=1.0)
    rng = np.random.default_rng(3)
    finals = []
    for _ in range(3000):
        pop, t = Population(SP, 1.0, None, [([0.5], 1)]), 0.0
        while True:
            r = step(pop, t, ks, rng, horizon=1.0)
            if r.event is None:
                break
            t = r.time
        finals.append(pop.N)
    finals = np.array(finals, float)
    assert abs(finals.mean() - math.e) <= 3 * finals.std(ddof=1) / math.sqrt(len(finals))
