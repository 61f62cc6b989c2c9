import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import (beta_stable_pmf_mp, beta_stable_survival_mp, pgf_from_pmf,
                     poisson_shifted_pmf)

from cases import chi_square_pvalue, closed_form_mean, shipped_laws
from branchsim.functions import PairFunction, TraitFunction
from branchsim.kernels import (KernelBoundError, KernelSet, MutationKernel, OffspringLaw,
                               beta_stable_pmf, beta_stable_survival, competition_pressure,
                               offspring_gm1, offspring_mean, offspring_pgf, offspring_pmf,
                               sample_mutant, sample_offspring_count)
from branchsim.population import Population
from branchsim.traits import ConfigurationError, TraitSpace

LAWS = shipped_laws()
LAW_IDS = [n for n, _, _ in LAWS]
SP = TraitSpace.interval(0.0, 1.0)


def fd_slope(law, x, h, s=1e-40):
    """Slope of the pgf at 1 from a one-sided difference of ``g(e^{-s}) - 1``.

    The stable deficit is ``w^beta / beta`` at step ``w``, so small indices need a tiny step;
    ``gm1`` has no cancellation there.
    """
    return -offspring_gm1(law, x, h, s) / -math.expm1(-s)


# pgf ------------------------------------------------------------------------

def test_single_pgf_is_identity():
    assert offspring_pgf(OffspringLaw.single(), [0.2], [0.7], 0.5) == 0.5


def test_beta_one_pgf_is_square():
    assert offspring_pgf(OffspringLaw.beta_stable(1.0), [0.1], [0.1], 0.5) == pytest.approx(0.25,
                                                                                            abs=1e-15)


@pytest.mark.parametrize("name,law,_ref", LAWS, ids=LAW_IDS)
def test_pgf_at_one(name, law, _ref):
    assert abs(offspring_pgf(law, [0.3], [0.8], 1.0) - 1.0) <= 1e-12


@pytest.mark.parametrize("z", [-0.1, 1.0000001, math.nan])
def test_pgf_domain_error(z):
    with pytest.raises(ValueError):
        offspring_pgf(OffspringLaw.single(), [0.0], [0.0], z)


@pytest.mark.parametrize("name,law,ref", LAWS, ids=LAW_IDS)
def test_pgf_matches_pmf_reference(name, law, ref):
    x, h = [0.2], [0.6]
    pmf = ref(x, h)
    for z in (0.0, 0.3, 0.7, 0.9):
        assert offspring_pgf(law, x, h, z) == pytest.approx(pgf_from_pmf(pmf, z), abs=1e-12)


@pytest.mark.parametrize("name,law,_ref", LAWS, ids=LAW_IDS)
def test_pgf_monotone_convex_on_grid(name, law, _ref):
    z = np.linspace(0.0, 1.0, 11)
    g = np.array([offspring_pgf(law, [0.4], [0.9], float(v)) for v in z])
    slopes = np.diff(g) / np.diff(z)
    assert np.all(slopes >= -1e-15)
    assert np.all(np.diff(slopes) >= -1e-12)


@pytest.mark.parametrize("name,law,_ref", LAWS, ids=LAW_IDS)
def test_pgf_identities_over_random_traits(name, law, _ref):
    rng = np.random.default_rng(7)
    for x, h in rng.random((1000, 2)):
        assert abs(offspring_pgf(law, [x], [h], 1.0) - 1.0) <= 1e-12
        m = offspring_mean(law, [x], [h])
        assert m == pytest.approx(closed_form_mean(name, [x], [h]), rel=1e-14)
        assert fd_slope(law, [x], [h]) == pytest.approx(m, rel=1e-6)


def test_gm1_agrees_with_pgf():
    law = OffspringLaw.beta_stable(0.5)
    for s in (1e-3, 0.1, 1.0, 5.0):
        assert offspring_gm1(law, [0], [0], s) == pytest.approx(
            offspring_pgf(law, [0], [0], math.exp(-s)) - 1.0, rel=1e-12, abs=1e-15)


# means ------------------------------------------------------------------------

def test_mean_examples():
    assert offspring_mean(OffspringLaw.single(), [0], [0]) == 1.0
    assert offspring_mean(OffspringLaw.beta_stable(0.5), [0], [0]) == pytest.approx(3.0)
    assert offspring_mean(OffspringLaw.jackpot_law(2.0), [0], [0]) == pytest.approx(3.0)


# pmf --------------------------------------------------------------------------

def test_beta_stable_pmf_frozen():
    # coefficients of the pgf expansion, frozen from the mpmath oracle
    expected = [0.0, 0.75, 0.125, 0.046875, 0.0234375, 0.013671875]
    assert beta_stable_pmf(0.5, 6) == pytest.approx(expected, abs=1e-16)
    assert beta_stable_pmf_mp(0.5, 6) == pytest.approx(expected, abs=1e-16)


@pytest.mark.parametrize("beta", [0.1, 0.3, 0.5, 0.9])
def test_beta_stable_pmf_recurrence_matches_binomial_series(beta):
    assert beta_stable_pmf(beta, 300) == pytest.approx(beta_stable_pmf_mp(beta, 300),
                                                       rel=1e-11, abs=1e-18)


@pytest.mark.parametrize("beta,n,frozen", [(0.5, 100, 0.0005663163719523259),
                                           (0.3, 1000, 9.700441576022384e-05)])
def test_beta_stable_survival(beta, n, frozen):
    assert float(beta_stable_survival(beta, n)) == pytest.approx(frozen, rel=1e-10)
    assert beta_stable_survival_mp(beta, n) == pytest.approx(frozen, rel=1e-10)


def test_jackpot_pmf_is_shifted_poisson():
    law = OffspringLaw.jackpot_law(PairFunction.distance(2.0))
    p = offspring_pmf(law, [0.1], [0.6], 30)
    assert p == pytest.approx(poisson_shifted_pmf(1.0, 30), rel=1e-12, abs=1e-300)
    at_zero = offspring_pmf(law, [0.4], [0.4], 5)
    assert list(at_zero) == [1.0, 0, 0, 0, 0]


# offspring samplers -------------------------------------------------------------

def test_single_always_one(rng):
    assert set(sample_offspring_count(OffspringLaw.single(), [0], [0], rng, 1000)) == {1}


def test_beta_one_always_two(rng):
    assert set(sample_offspring_count(OffspringLaw.beta_stable(1.0), [0], [0], rng, 1000)) == {2}


def test_beta_half_sample_mean():
    rng = np.random.default_rng(1)
    k = sample_offspring_count(OffspringLaw.beta_stable(0.5), [0], [0], rng, 10 ** 6)
    assert k.min() >= 2
    assert abs(k.mean() - 3.0) <= 0.05


def test_sampler_cap_is_respected(rng):
    law = OffspringLaw.beta_stable(0.2, kmax=50)
    k = sample_offspring_count(law, [0], [0], rng, 20000)
    assert k.max() <= 50
    # mass beyond the cap is lumped onto kmax
    assert np.mean(k == 50) == pytest.approx(float(beta_stable_survival(0.2, 49)), abs=0.01)


def test_scalar_and_vector_sampling_agree():
    law = OffspringLaw.jackpot_law(1.5)
    a = np.random.default_rng(3)
    b = np.random.default_rng(3)
    v = sample_offspring_count(law, [0], [0], a, 50)
    s = [sample_offspring_count(law, [0], [0], b) for _ in range(50)]
    assert list(v) == s


@pytest.mark.parametrize("name,law,ref", LAWS, ids=LAW_IDS)
def test_sampler_chi_square(name, law, ref):
    x, h = [0.1], [0.8]
    rng = np.random.default_rng(11)
    k = sample_offspring_count(law, x, h, rng, 200_000)
    p, _ = chi_square_pvalue(k, ref(x, h))
    assert p > 1e-3


# construction errors ----------------------------------------------------------------

@pytest.mark.parametrize("beta", [0.0, -0.5, 1.2, math.nan])
def test_beta_range(beta):
    with pytest.raises(ConfigurationError, match=r"β must lie in \(0,1\]"):
        OffspringLaw.beta_stable(beta)


def test_custom_pmf_validation():
    with pytest.raises(ConfigurationError):
        OffspringLaw.custom_pmf([0.5, 0.6])
    with pytest.raises(ConfigurationError):
        OffspringLaw.custom_pmf([1.2, -0.2])
    with pytest.raises(ConfigurationError):
        OffspringLaw.custom_pmf({0: 0.5, 1: 0.5})
    law = OffspringLaw.custom_pmf({1: 0.5, 3: 0.5 + 5e-10})
    assert math.fsum(law.pmf) == pytest.approx(1.0, abs=1e-15)
    assert offspring_mean(law, [0], [0]) == pytest.approx(2.0, rel=1e-9)


def test_offspring_config_round_trip():
    for _, law, _ in LAWS:
        assert OffspringLaw.from_config(law.to_config()) == law


# mutation -------------------------------------------------------------------------

def test_two_trait_switches_label(labels2, rng):
    m = MutationKernel.two_trait(labels2, [1.0, 1.0])
    assert set(sample_mutant(m, [0], rng, 1000)[:, 0]) == {1.0}
    assert set(sample_mutant(m, [1], rng, 1000)[:, 0]) == {0.0}


def test_gaussian_concentrates(unit, rng):
    fracs = []
    for std in (0.1, 1e-2, 1e-3, 1e-6):
        h = sample_mutant(MutationKernel.gaussian(unit, std), [0.5], rng, 20000)
        fracs.append(np.mean(np.abs(h[:, 0] - 0.5) > 5e-3))
    assert fracs == sorted(fracs, reverse=True)
    assert fracs[-2] == 0.0 and fracs[-1] == 0.0


def test_gaussian_boundary_fallback_stays_inside(unit, rng):
    # mean far outside the box forces the inverse-CDF fallback
    m = MutationKernel.gaussian(unit, 0.01, shift=5.0)
    h = sample_mutant(m, [0.99], rng, 20000)[:, 0]
    assert np.all((h >= 0.0) & (h <= 1.0))
    # conditioned law is close to 1 - Exp(rate |z|/std) with |z| = 499
    assert 1.0 - h.mean() == pytest.approx(0.01 / 499, rel=0.03)
    nodes, w = m.quadrature([0.99])
    assert float(np.sum(w * nodes[:, 0])) == pytest.approx(h.mean(), abs=1e-6)


def test_pareto_offset_tail():
    sp = TraitSpace.interval(-1e6, 1e6)
    beta, eta, K = 1.5, 1.0, 100.0
    scale = K ** (eta / beta)
    m = MutationKernel.pareto(sp, beta, scale)
    h = sample_mutant(m, [0.0], np.random.default_rng(5), 200_000)[:, 0]
    r = np.abs(h) * scale
    for u in (0.5, 1.0, 3.0, 10.0):
        assert np.mean(r > u) == pytest.approx((1 + u) ** -beta, abs=0.005)
    assert abs(np.mean(h > 0) - 0.5) < 0.01


@pytest.mark.parametrize("kind", ["gaussian", "pareto", "histogram", "matrix"])
def test_mutants_stay_in_space(kind, square, labels2):
    rng = np.random.default_rng(2)
    if kind == "gaussian":
        m, x = MutationKernel.gaussian(square, 0.5, shift=0.3), [0.9, -0.9]
    elif kind == "pareto":
        m, x = MutationKernel.pareto(square, 1.2, 0.5), [0.0, 0.99]
    elif kind == "histogram":
        m, x = MutationKernel.histogram(square, [-0.5, 0.0, 0.5], [1.0, 3.0]), [0.1, 0.0]
    else:
        m, x = MutationKernel.transition_matrix(labels2, [[0.3, 0.7], [0.5, 0.5]]), [1]
    h = sample_mutant(m, x, rng, 10 ** 6)
    assert np.all(m.space.contains_many(h))


def test_quadrature_matches_monte_carlo(unit, rng):
    m = MutationKernel.gaussian(unit, 0.2)
    f = lambda H: np.cos(3 * H[:, 0])  # noqa: E731
    exact = m.expectation([0.1], f)
    mc = f(sample_mutant(m, [0.1], rng, 400_000)).mean()
    assert exact == pytest.approx(mc, abs=5e-3)
    nodes, w = m.quadrature([0.1])
    assert math.fsum(w) == pytest.approx(1.0, abs=1e-12)
    assert np.all(unit.contains_many(nodes))


def test_quadrature_many_matches_single(unit):
    m = MutationKernel.gaussian(unit, 0.05)
    X = np.array([[0.0], [0.3], [0.97]])
    nodes, w = m.quadrature_many(X)
    for i, x in enumerate(X):
        a = float(np.sum(w[i] * np.sin(nodes[i, :, 0])))
        b = m.expectation(x, lambda H: np.sin(H[:, 0]))
        assert a == pytest.approx(b, abs=1e-12)


# competition -------------------------------------------------------------------------

def test_competition_pressure_examples(unit):
    pop = Population(unit, 10.0, None, [([0.5], 50)])
    assert competition_pressure(PairFunction.const(0.0), [0.5], pop) == 0.0
    assert competition_pressure(PairFunction.const(2.0), [0.5], pop) == pytest.approx(10.0)
    one = Population(unit, 1.0, None, [([0.3], 1)])
    assert competition_pressure(PairFunction.distance(1.0), [0.3], one) == 0.0


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 5)), min_size=1, max_size=200),
       st.floats(0, 1))
def test_competition_pressure_matches_double_loop(atoms, x):
    K = 7.0
    pop = Population(SP, K, None, [([a], k) for a, k in atoms])
    c = PairFunction.gaussian(1.3, 0.2)
    # ascending order over individuals, correctly rounded
    terms = []
    for i in range(1, pop.N + 1):
        terms.append(float(c([x], pop.canonical_index(i))))
    assert competition_pressure(c, [x], pop) == math.fsum(terms) / K


# kernel set ----------------------------------------------------------------------------

def _kernels(**kw):
    base = dict(space=SP, K=10.0, birth=TraitFunction.const(1.0), death=TraitFunction.const(0.5),
                competition=PairFunction.const(1.0), mutation_prob=TraitFunction.const(0.1),
                mutation=MutationKernel.gaussian(SP, 0.1), offspring=OffspringLaw.single())
    base.update(kw)
    return KernelSet(**base)


def test_kernel_set_default_bounds():
    ks = _kernels(birth=TraitFunction.const(1.0) + TraitFunction.gaussian(1.0, [0.5], 0.3))
    assert ks.b_bar == pytest.approx(2.0)
    ks.validate()


def test_kernel_set_detects_misdeclared_bound():
    ks = _kernels(birth=TraitFunction.linear([2.0]), b_bar=1.0)
    with pytest.raises(KernelBoundError, match="birth rate"):
        ks.validate()


def test_kernel_set_rejects_bad_mutation_probability():
    ks = _kernels(mutation_prob=TraitFunction.linear([2.0]))
    with pytest.raises(KernelBoundError, match="mutation probability"):
        ks.validate()


def test_kernel_set_rejects_foreign_space(labels2):
    with pytest.raises(ConfigurationError):
        _kernels(mutation=MutationKernel.none(labels2))


def test_kappa_bound_enforced():
    with pytest.raises(ConfigurationError, match="kappa_bound"):
        _kernels(offspring=OffspringLaw.jackpot_law(2.0), kappa_bound=2.0)
