"""Acceptance criteria 1-9, each at its stated tolerance, one PASS/FAIL line apiece."""

import math
import time

import numpy as np
import pytest
from cases import chi_square_pvalue, closed_form_mean, shipped_laws
from oracles import generator_rates, logistic, riccati

from branchsim import diagnostics as D
from branchsim.engine import CLONAL, DEATH_NATURAL, MUTANT, SimulationConfig, run_replicates
from branchsim.functions import PairFunction, TraitFunction
from branchsim.kernels import (KernelSet, MutationKernel, OffspringLaw, offspring_gm1,
                               offspring_pgf, sample_offspring_count)
from branchsim.outputs import replay, run_scenario
from branchsim.population import TestFunction
from branchsim.scaling import ScalingFamily, validate_convergence
from branchsim.scenario import preset_scenario
from branchsim.traits import TraitSpace

pytestmark = pytest.mark.acceptance
ONE = TestFunction.constant(1.0)


def test_criterion_1_kernel_identities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_pgf = worst_slope = 0.0
    worst_p = 1.0
    for name, law, ref in shipped_laws():
        for x, h in (([0.1], [0.8]), ([0.5], [0.5]), ([0.9], [0.2])):
            worst_pgf = max(worst_pgf, abs(offspring_pgf(law, x, h, 1.0) - 1.0))
            # one-sided difference of g(e^{-s}) at a step small enough for the stable deficit
            s = 1e-40
            slope = -offspring_gm1(law, x, h, s) / -math.expm1(-s)
            mean = closed_form_mean(name, x, h)
            worst_slope = max(worst_slope, abs(slope - mean) / mean)
        x, h = [0.1], [0.8]
        p, _ = chi_square_pvalue(sample_offspring_count(law, x, h, rng, 10 ** 6), ref(x, h))
        worst_p = min(worst_p, p)
    ok = worst_pgf <= 1e-12 and worst_slope <= 1e-6 and worst_p > 1e-3
    verdict(1, ok, f"max|pgf(1)-1|={worst_pgf:.2e}, max rel slope error={worst_slope:.2e}, "
                   f"min chi-square p={worst_p:.3g} ({time.perf_counter() - t0:.1f}s)")
    assert ok


def _holding_and_counts(trajs, horizon):
    """Time spent in each count state and transitions out of it, by transition type."""
    hold, cnt = {}, {}
    names = {CLONAL: "clonal", MUTANT: "mutant", DEATH_NATURAL: "natural"}
    for tr in trajs:
        lab = tr.traits[:, 0].astype(int)
        m = [0, 0]
        a, b = tr.atom_offsets[0], tr.atom_offsets[1]
        for tid, mu in zip(tr.atom_tid[a:b], tr.atom_mult[a:b]):
            m[lab[tid]] += int(mu)
        ev, last = tr.events, 0.0
        for t, k, pa, ch in zip(ev.t.tolist(), ev.kind.tolist(), ev.parent.tolist(),
                                ev.child.tolist()):
            s = tuple(m)
            hold[s] = hold.get(s, 0.0) + t - last
            last = t
            i, j = lab[pa], lab[ch]
            key = (names.get(k, "competition"), i) + ((j,) if k == MUTANT else ())
            cnt[(s, key)] = cnt.get((s, key), 0) + 1
            if k in (CLONAL, MUTANT):
                m[j] += 1
            else:
                m[i] -= 1
        s = tuple(m)
        hold[s] = hold.get(s, 0.0) + horizon - last
    return hold, cnt


def test_criterion_2_generator_rates(verdict):
    t0 = time.perf_counter()
    sp = TraitSpace.finite(["x1", "x2"])
    b, d, p = [4.0, 3.0], [0.2, 0.4], [0.3, 0.5]
    row, c = [[0.0, 1.0], [1.0, 0.0]], [[1.5, 1.0], [0.8, 1.4]]
    ks = KernelSet(sp, 1.0, TraitFunction.table(b), TraitFunction.table(d),
                   PairFunction.table(c), TraitFunction.table(p),
                   MutationKernel.transition_matrix(sp, row), OffspringLaw.single())
    cfg = SimulationConfig(ks, (("x1", 2), ("x2", 1)), horizon=50.0, snapshot_times=(0.0,),
                           record_events=True, seed=2)
    trajs = run_replicates(cfg, 30000)
    n_events = sum(len(tr.events) for tr in trajs)
    hold, cnt = _holding_and_counts(trajs, cfg.horizon)
    obs, exp = {}, {}
    for s, h in hold.items():
        if not 0 < sum(s) <= 5:
            continue
        for key, r in generator_rates(s, b, d, p, row, c, 1.0).items():
            exp[key] = exp.get(key, 0.0) + r * h
            obs[key] = obs.get(key, 0) + cnt.get((s, key), 0)
    # counts minus integrated rate is a martingale with variance equal to its compensator
    z = {k: (obs[k] - exp[k]) / math.sqrt(exp[k]) for k in exp}
    worst = max(z, key=lambda k: abs(z[k]))
    ok = n_events >= 10 ** 6 and len(z) == 8 and all(abs(v) <= 3 for v in z.values())
    verdict(2, ok, f"{n_events} events, {len(z)} transition types, max|z|={abs(z[worst]):.2f} "
                   f"at {worst} ({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_3_scaling_validation(verdict):
    t0 = time.perf_counter()
    sp = TraitSpace.interval(0.0, 1.0)
    rep = validate_convergence(ScalingFamily.single_offspring(sp, b=1.0, sigma=1.0),
                               K_list=(1e2, 1e3, 1e4))
    det = validate_convergence(ScalingFamily.deterministic(sp, b=2.0, d=1.0),
                               K_list=(1e2, 1e3, 1e4))
    decreasing = all(x > y for x, y in zip(rep.errors, rep.errors[1:]))
    vanishing = (all(x > y for x, y in zip(det.curvature, det.curvature[1:]))
                 and det.curvature[-1] < 1e-3)
    ok = decreasing and 0.8 <= rep.exponent <= 1.2 and vanishing
    verdict(3, ok, f"e(K)={[f'{e:.3g}' for e in rep.errors]}, exponent={rep.exponent:.3f}, "
                   f"deterministic curvature={[f'{v:.2g}' for v in det.curvature]} "
                   f"({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_4_exponential_martingale(verdict):
    t0 = time.perf_counter()
    s = preset_scenario("logistic")
    trajs = run_replicates(s.sim_config(100.0), 10 ** 4)
    reps = [D.exp_martingale_check(trajs, phi, s.kernels(100.0), [0.25, 0.5, 1.0], name)
            for name, phi in (("1", ONE), ("bump", TestFunction.bump()))]
    zmax = max(float(np.max(np.abs(r.z))) for r in reps)
    ok = zmax <= 3
    verdict(4, ok, f"R=10^4, K=100, max|z| over t and φ = {zmax:.2f} "
                   f"({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_5_feller_laplace(verdict):
    t0 = time.perf_counter()
    s = preset_scenario("feller")
    trajs = run_replicates(s.sim_config(200.0, record_events=False), 10 ** 4)
    est = D.laplace_functional(trajs, ONE, [1.0])
    oracle = math.exp(-riccati(1.0, 1.0, 1.0))
    gap = abs(float(est.mean[0]) - oracle)
    ok = gap <= 0.02
    verdict(5, ok, f"E[exp(-<ν_1,1>)]={est.mean[0]:.4f}±{est.se[0]:.4f}, "
                   f"oracle={oracle:.4f}, gap={gap:.4f} ({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_6_deterministic_limit(verdict):
    t0 = time.perf_counter()
    s = preset_scenario("deterministic")
    cfg = s.sim_config(1e4)
    trajs = run_replicates(cfg, 100)
    t = np.asarray(cfg.snapshot_times)
    mean = np.mean([tr.snap_mass for tr in trajs], axis=0)
    gap = float(np.max(np.abs(mean - logistic(0.1, 1.0, 1.0, t))))
    ok = t[-1] == 5.0 and gap <= 0.05
    verdict(6, ok, f"sup_t |mean mass - logistic| = {gap:.4f} over {len(t)} times "
                   f"({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_7_jump_census(verdict):
    t0 = time.perf_counter()
    s = preset_scenario("beta_census")
    trajs = run_replicates(s.sim_config(1e3), 500)
    rep = D.jump_census(trajs, 0.1, s.family.limit(), s.kernels(1e3))
    slope_ok = abs(rep.slope - (-0.5)) <= 0.15
    count_ok = abs(rep.z_limit) <= 3
    ok = slope_ok and count_ok
    verdict(7, ok, f"{rep.count} bursts, tail slope={rep.slope:.3f} (target -0.5±0.15; "
                   f"pmf oracle {rep.oracle_slope:.3f}; mass-weighted {rep.weighted_slope:.3f}), "
                   f"intensity z={rep.z_limit:+.2f} ({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_8_moment_uniformity(verdict):
    t0 = time.perf_counter()
    s = preset_scenario("logistic")
    reps = []
    for K, R in ((1e2, 2000), (1e3, 500), (1e4, 100)):
        trajs = run_replicates(s.sim_config(K, record_events=False), R)
        reps.append(D.moment_estimate(trajs, 1, [1.0]))
    tr = D.moment_trend(reps)
    lo, hi = tr.ci
    ok = tr.contains_zero
    verdict(8, ok, f"means={[f'{m:.4f}' for m in tr.means]}, slope per decade "
                   f"{tr.slope:+.4f}, CI [{lo:+.4f}, {hi:+.4f}], "
                   f"not increasing={tr.not_increasing} ({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_9_replay_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    results = []
    for name, K, R in (("feller", 200.0, 40), ("two_trait", 100.0, 40), ("beta_census", 1e3, 8)):
        run_scenario(preset_scenario(name), tmp_path / name, K, replicates=R, threads=1)
        for threads in (1, 4, 8):
            res = replay(tmp_path / name / "manifest.json", threads=threads)
            results.append((name, threads, res.identical))
    bad = [(n, t) for n, t, ok in results if not ok]
    ok = not bad
    verdict(9, ok, f"{len(results)} replays across threads 1, 4, 8 "
                   f"{'all byte-identical' if ok else f'mismatch in {bad}'} "
                   f"({time.perf_counter() - t0:.1f}s)")
    assert ok
