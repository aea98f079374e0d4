"""Numerical laboratory for mean-field games with absorption.

Simulates the N-player absorbed-diffusion game, solves the limiting
mean-field game by damped fixed-point iteration over sub-probability
flows, and measures the large-population limit behaviour (empirical
measure convergence, vanishing benefit of unilateral deviations).
"""

from .analysis import (ChaosTable, CostEstimate, MartingaleCheck, MomentReport,
                       NashGapCurve, NashGapRow, RateFit, chaos_study,
                       estimate_cost, fit_rate, martingale_check, moment_check,
                       nash_gap)
from .errors import BlowupError, ConfigError, DomainError, SolverError
from .measures import (EmpiricalRecord, GridSpec, SubProbFlow,
                       alpha_weighted_distance, flow_from_record, loss_at,
                       mean_at, wasserstein1_flows, wasserstein1_sample_flow,
                       wasserstein1_samples)
from .mfg import (ConsistencyResidual, FixedPointReport, consistency_residual,
                  exit_positivity_check, picard_solve, uncontrolled_flow)
from .model import (AssumptionReport, CoefficientValues, FamilySpec, InitialLaw,
                    ModelSpec, TruncationSchedule, check_assumptions,
                    eval_coefficients, sample_initial, truncate_model)
from .particle import (ParticleEnsemble, SimConfig, bridge_absorption_prob,
                       euler_step, path_cost, path_costs, simulate_frozen,
                       simulate_nplayer)
from .pde import (FeedbackPolicy, HamiltonianMin, ValueField,
                  minimize_hamiltonian, solve_hjb, solve_killed_fp)

__version__ = "0.1.0"
