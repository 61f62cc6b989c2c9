import math

import mpmath as mp
import numpy as np
import pytest
from oracles import stable_psi_quad, stable_tail_mp

from branchsim.functions import PairFunction, TraitFunction
from branchsim.population import TestFunction
from branchsim.scaling import (LevyMeasure, MutationScaling, ScalingFamily,
                               beta_stable_burst_tail, levy_integral, stable_amplitude,
                               validate_convergence, validate_mutation_generator)
from branchsim.traits import ConfigurationError, TraitSpace

SP = TraitSpace.interval(0.0, 1.0)


def families():
    return {
        "single_offspring": ScalingFamily.single_offspring(SP, b=1.0, sigma=1.0),
        "critical": ScalingFamily.single_offspring(SP, b=0.0, sigma=1.0),
        "beta_stable": ScalingFamily.beta_stable(SP, 0.5, gamma=1.0, d0=0.0),
        "beta_stable_d0": ScalingFamily.beta_stable(SP, 0.7, gamma=2.0, d0=0.3),
        "jackpot": ScalingFamily.jackpot_family(SP, PairFunction.distance(1.0), b=1.0,
                                                sigma=1.0),
        "deterministic": ScalingFamily.deterministic(SP, b=2.0, d=1.0),
        "deterministic_kappa": ScalingFamily.deterministic(SP, b=1.0, d=0.5, kappa=2.0),
    }


FAMS = families()


# psi_K -------------------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(FAMS))
def test_psi_K_zero_at_zero(name):
    for K in (1.0, 100.0, 1e6):
        for x in (0.0, 0.37, 1.0):
            assert FAMS[name].psi_K(K, [x], 0.0) == 0.0


def test_single_offspring_rescaled_value():
    K = 1000.0
    fam = ScalingFamily.single_offspring(SP, b=0.0, sigma=1.0)
    exact = float(mp.mpf(K) ** 2 * (mp.exp(-1 / mp.mpf(K)) + mp.exp(1 / mp.mpf(K)) - 2))
    assert fam.rescaled_psi(K, [0.5], 1.0) == pytest.approx(exact, rel=1e-12)
    assert exact == pytest.approx(1.000000083, abs=1e-9)


def test_jackpot_psi_K_spot_value():
    K = 10.0
    fam = ScalingFamily.jackpot_family(SP, 2.0, b=0.0, sigma=1.0)
    z = mp.mpf(1)
    s = mp.exp(-z)
    g = s * mp.exp(-2 * (1 - s))
    exact = float(K * (g - 1) + K * (mp.exp(z) - 1))
    assert fam.psi_K(K, [0.3], 1.0) == pytest.approx(exact, rel=1e-13)


def test_psi_K_negative_argument():
    with pytest.raises(ValueError):
        FAMS["critical"].psi_K(10.0, [0.5], -1.0)


def test_critical_rescaled_psi_nonnegative_convex():
    fam = FAMS["critical"]
    z = np.linspace(0, 5, 41)
    for K in (10.0, 1e3, 1e5):
        v = np.array([fam.rescaled_psi(K, [0.5], float(t)) for t in z])
        assert np.all(v >= 0)
        assert np.all(np.diff(v, 2) >= -1e-9)


# psi limit ------------------------------------------------------------------------------

def test_psi_limit_without_jumps():
    mech = ScalingFamily.single_offspring(SP, b=1.0, sigma=2.0).limit()
    assert mech.psi([0.5], 3.0) == pytest.approx(15.0)
    assert mech.psi([0.5], 0.0) == 0.0


@pytest.mark.parametrize("z", [0.5, 1.0, 5.0])
def test_stable_quadrature_self_convergent(z):
    levy = LevyMeasure("stable", 0.5, stable_amplitude(0.5, 1.0))
    coarse = levy_integral(levy, z)
    fine = levy_integral(levy, z, panels=320)
    assert coarse == pytest.approx(fine, rel=1e-8)
    assert coarse == pytest.approx(z ** 1.5 / 0.5, rel=1e-8)


@pytest.mark.parametrize("beta,gamma,z", [(0.5, 1.0, 2.0), (0.3, 2.0, 0.7), (0.8, 0.5, 4.0)])
def test_stable_psi_matches_mpmath(beta, gamma, z):
    mech = ScalingFamily.beta_stable(SP, beta, gamma=gamma).limit()
    assert mech.psi([0.2], z) == pytest.approx(stable_psi_quad(beta, gamma, z), rel=1e-8)
    assert mech.psi([0.2], z) == pytest.approx(gamma * z ** (1 + beta) / beta, rel=1e-8)


def test_stable_psi_frozen():
    # frozen from mpmath quadrature
    assert stable_psi_quad(0.5, 1.0, 2.0) == pytest.approx(5.656854249492381, rel=1e-12)


def test_stable_tail():
    levy = ScalingFamily.beta_stable(SP, 0.5, gamma=1.0).limit().levy
    assert levy.tail(0.1) == pytest.approx(17.84124116152771, rel=1e-12)
    assert stable_tail_mp(0.5, 1.0, 0.1) == pytest.approx(17.84124116152771, rel=1e-12)
    assert levy.moment_bound() < math.inf


def test_tabulated_levy_matches_stable_on_window():
    C = stable_amplitude(0.5, 1.0)
    grid = np.geomspace(1e-3, 1e3, 400)
    tab = LevyMeasure("tabulated", grid=tuple(grid), density_values=tuple(C * grid ** -2.5))
    stable = LevyMeasure("stable", 0.5, C)
    assert tab.tail(0.1) == pytest.approx(stable.tail(0.1) - stable.tail(1e3), rel=1e-6)


def test_beta_stable_burst_tail_from_pmf():
    from oracles import beta_stable_survival_mp

    assert beta_stable_burst_tail(0.5, 1000.0, 0.1) == pytest.approx(
        beta_stable_survival_mp(0.5, 99), rel=1e-10)


# validate_convergence ---------------------------------------------------------------------

def test_single_offspring_convergence_rate():
    rep = validate_convergence(FAMS["single_offspring"], K_list=(1e2, 1e3, 1e4))
    assert rep.passed
    assert 0.8 <= rep.exponent <= 1.2
    assert all(a > b for a, b in zip(rep.errors, rep.errors[1:]))


def test_deterministic_curvature_vanishes():
    rep = validate_convergence(FAMS["deterministic"], K_list=(1e2, 1e3, 1e4))
    assert rep.curvature[-1] < rep.curvature[0]
    assert rep.curvature[-1] < 1e-3
    assert rep.passed


def test_beta_stable_convergence():
    fam = FAMS["beta_stable"]
    rep = validate_convergence(fam, K_list=(1e2, 1e3, 1e4, 1e6))
    assert all(a > b for a, b in zip(rep.errors, rep.errors[1:]))
    lim = fam.limit()
    assert fam.rescaled_psi(1e6, [0.5], 2.0) == pytest.approx(lim.psi([0.5], 2.0), rel=1e-2)


@pytest.mark.parametrize("name", sorted(FAMS))
def test_errors_nonincreasing_for_every_family(name):
    rep = validate_convergence(FAMS[name], K_list=(1e2, 1e3, 1e4))
    assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(rep.errors, rep.errors[1:]))


def test_k_list_must_increase():
    with pytest.raises(ValueError):
        validate_convergence(FAMS["critical"], K_list=(1e3, 1e2))


def test_beta_stable_drift_gap_bounded():
    fam = FAMS["beta_stable_d0"]
    for K in (10.0, 1e3, 1e6):
        assert fam.drift_gap(K, SP.grid(9)) == pytest.approx(0.3, rel=1e-9)


def test_family_beta_range():
    with pytest.raises(ConfigurationError, match=r"β must lie in \(0,1\]"):
        ScalingFamily.beta_stable(SP, 1.5)


def test_jackpot_needs_vanishing_diagonal():
    with pytest.raises(ConfigurationError, match="diagonal"):
        ScalingFamily.jackpot_family(SP, 2.0).limit()


def test_report_csv(tmp_path):
    rep = validate_convergence(FAMS["critical"], K_list=(10.0, 100.0))
    rep.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("K,sup_error") and len(lines) == 3
    assert rep.summary().startswith(("PASS", "FAIL"))


# mutation generators ---------------------------------------------------------------------

def test_two_trait_generator_exact():
    sp = TraitSpace.finite(["x1", "x2"])
    fam = ScalingFamily.single_offspring(
        sp, b=0.0, sigma=1.0, mutation_prob=TraitFunction.const(1.0),
        mutation=MutationScaling("two_trait", q=(0.3, 0.6), normalize=True))
    phi = TestFunction.tabulated([0, 1], [1.0, 3.0])
    rep = validate_mutation_generator(fam, None, phi, np.array([[0.0], [1.0]]),
                                      K_list=(1e2, 1e4))
    assert max(rep.A1_errors) <= 1e-12
    mech = fam.limit()
    A = mech.A1(phi)(np.array([[0.0], [1.0]]))
    assert A == pytest.approx([0.3 * 2.0, 0.6 * -2.0])


def test_gaussian_generator_limit():
    fam = ScalingFamily.single_offspring(
        SP, b=0.0, sigma=1.0, mutation_prob=TraitFunction.const(1.0),
        mutation=MutationScaling("gaussian", theta=0.5, std_exponent=0.5))
    phi = TestFunction.cosine(freq=1.0, base=2.0)
    X = np.array([[0.5]])
    rep = validate_mutation_generator(fam, None, phi, X, K_list=(1e2, 1e4, 1e6))
    assert rep.A1_errors[-1] < rep.A1_errors[0]
    assert rep.A1_errors[-1] < 1e-3
    expected = 0.5 * 0.5 ** 2 * phi.second_derivative(X)
    assert fam.limit().A1(phi)(X) == pytest.approx(expected)


def test_constant_phi_has_zero_drift():
    fam = ScalingFamily.single_offspring(
        SP, mutation_prob=TraitFunction.const(1.0),
        mutation=MutationScaling("gaussian", theta=0.5, std_exponent=0.5))
    rep = validate_mutation_generator(fam, None, TestFunction.constant(2.0), SP.grid(5))
    assert max(rep.A1_errors) <= 1e-12


def test_generator_needs_images():
    fam = ScalingFamily.single_offspring(
        SP, mutation_prob=TraitFunction.const(1.0),
        mutation=MutationScaling("gaussian", theta=0.5, std_exponent=0.5))
    phi = TestFunction.tabulated([0, 1], [1.0, 2.0])
    with pytest.raises(ConfigurationError):
        validate_mutation_generator(fam, None, phi, SP.grid(3))


def test_family_config_round_trip():
    for fam in FAMS.values():
        cfg = fam.to_config()
        assert cfg["preset"] == fam.preset
