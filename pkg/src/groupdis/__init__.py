"""Pricing engine for disability insurance with collective health-claim feedback.

Forward integro-differential solvers on a triangular (time, duration,
claim-count) grid, mean-field coupling through the population average of a
user-chosen statistic, exact thinning-based simulation of the interacting
portfolio, cash-flow/reserve valuation, and occurrence-exposure estimation.
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, DomainError, FingerprintError,
                     GroupdisError, NumericalError, RateBoundError)
from .estimate import (BucketSpec, CompanyObservation, ObservationSet,
                       OccurrenceExposure, occurrence_exposure_mle, partial_loglik)
from .forward import (MeanPath, SolverReport, path_fingerprint, recompute_mean_path,
                      solve_health, solve_meanfield_occupation,
                      solve_meanfield_transition, solve_semimarkov)
from .grid import (GridSpec, ProbabilityGrid, build_grid,
                   integrate_against_duration_cdf, poisson_tail, select_cutoff)
from .model import (ACTIVE, DEAD, DISABLED, AveragingFunction, Discount, PaymentSpec,
                    RateModel, Scenario, StateSpace, collapse_single_individual,
                    eval_health_hazard, eval_transition_rate, group_average,
                    load_scenario, make_disability_annuity, make_disability_scenario,
                    strip_health)
from .simulate import (Diagnostics, MCEstimate, PathEvent, PortfolioPath,
                       chaos_diagnostics, mc_reserve, path_present_value,
                       per_individual_pvs, simulate_portfolio)
from .valuation import CashFlow, Reserve, cashflow_to_csv, expected_cashflow, reserve

__all__ = [name for name in dir() if not name.startswith("_")]
