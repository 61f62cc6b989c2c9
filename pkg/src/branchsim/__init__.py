"""Exact simulation and verification of trait-structured branching populations."""

from .functions import PairFunction, TraitFunction
from .kernels import (KernelBoundError, KernelSet, MutationKernel, OffspringLaw,
                      competition_pressure, offspring_mean, offspring_pgf, offspring_pmf,
                      sample_mutant, sample_offspring_count)
from .population import Population, TestFunction
from .traits import ConfigurationError, TraitSpace

__version__ = "0.1.0"
