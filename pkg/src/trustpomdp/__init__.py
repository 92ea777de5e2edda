"""Trust-aware assistance seeking: trust IOHMM, belief-MDP planning and simulation."""
from .iohmm import TrustIOHMM, baum_welch_fit, belief_update, forward_filter, laplace_uncertainty, log_likelihood
from .model import (
    REFERENCE_ENV,
    REFERENCE_PARAMS,
    Complexity,
    EnvConfig,
    Experience,
    HumanAction,
    ModelParams,
    RobotAction,
    TrialRecord,
    TrustState,
    validate_params,
)
from .solver import BeliefMDPPlanner, Policy, build_belief_mdp, solve, trust_agnostic_baseline, value_iteration

__version__ = "0.1.0"
