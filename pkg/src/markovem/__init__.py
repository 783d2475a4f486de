"""Monte Carlo EM with importance sampling for Probit Markov-chain models of
incomplete panel data."""

from .em import EmResult, ScheduleConfig, initialize, run_em, step_schedule
from .errors import (BudgetExceededError, ContractError, ConvergenceWarning, DataError,
                     DegenerateIndividualError, DomainError, InfeasibleBridgeError, InitializationError,
                     MarkovEMError, SpecError)
from .estep import impute_individual, run_estep
from .likelihood import complete_loglik
from .model import (DEAD, MISSING, CovariateDef, ModelSpec, OutcomeDef, OutcomeKind, Panel, ParamSet,
                    make_panel, propagate_absorbing, validate_spec)
from .mstep import OptimizerConfig, eval_q, maximize_q
from .oracle import EnumerationBudget, direct_mle, exact_estep, exact_observed_loglik
from .probit import log_phi_cdf, phi_cdf
from .simulate import SimulationConfig, simulate_bridge, simulate_forward, weighted_estimate

__version__ = "0.1.0"
