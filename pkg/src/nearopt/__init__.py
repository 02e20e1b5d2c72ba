"""Monte Carlo near-optimality certificates for singular stochastic control.

Simulate controlled SDEs with singular (bounded-variation) controls, solve
the first- and second-order adjoint BSDEs by regression, and check the
necessary and sufficient near-optimality conditions numerically.
"""
from .adjoint import (AdjointSolution, FirstOrderAdjoint, RegressionConfig, RegressionError,
                      SecondOrderAdjoint, estimate_adjoint_deviation, solve_adjoints, solve_first_order,
                      solve_second_order)
from .certify import (CertificateConfig, CertificateReport, Residual, certify, convex_perturb_singular,
                      near_optimality_gap, necessary_regular_gap, necessary_singular_gap, spike_perturb,
                      sufficient_check, support_violation)
from .controls import ControlPair, RegularControl, SingularControl
from .forward import CostEstimate, StateEnsemble, cost, estimate_state_deviation, estimate_value, simulate
from .hamiltonian import (GradientInterval, HamiltonianFrame, clarke_interval, hamiltonian, script_H,
                          tilde_H, tilde_H_interval)
from .metrics import WeightEnsemble, d, d1, d2, weighted_d1
from .noise import NoiseEnsemble, sample_noise
from .problem import Box, DerivativeBundle, ProblemSpec, TimeGrid, get_problem, register_problem

__version__ = "0.1.0"
