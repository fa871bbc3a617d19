"""Counterfactual inference for finite-horizon MDPs via Gumbel-max SCMs,
with k-step influence pruning and optimal (k, m)-constrained policies."""

from .errors import (
    CfmdpError,
    EmptyPrunedMdp,
    InfeasibleBudget,
    InvalidConfig,
    MissingKernelRow,
    RejectionBudgetExceeded,
    UndefinedPolicyAction,
    UnknownEnvironment,
    ValidationFailed,
    ZeroProbabilityObservation,
)
from .mdp import (
    Mdp,
    ObservedPath,
    Policy,
    ValidationReport,
    mdp_from_json,
    mdp_hash,
    mdp_to_json,
    path_from_json,
    path_hash,
    path_return,
    path_to_json,
    sample_path,
    validate_mdp,
    validate_path,
    value_iteration,
)
from .gumbel import (
    CfKernelEstimate,
    CfMdp,
    GumbelPosterior,
    GumbelVector,
    build_cf_mdp,
    build_posterior,
    cf_transition,
    gumbel_max_step,
    load_posterior,
    nominal_cf_mdp,
    posterior_cache_key,
    posterior_sample_rejection,
    posterior_sample_topdown,
    prior_posterior,
    save_posterior,
)
from .influence import (
    InfluenceSets,
    PrunedCfMdp,
    SizeReport,
    influenced_states,
    one_step_influenced,
    prune_cf_mdp,
    pruned_size_report,
    reachback,
)
from .solver import (
    CfPolicy,
    RolloutSummary,
    SweepResult,
    check_sweep_monotonicity,
    policy_to_json,
    rollout,
    solve_km,
    sweep,
)
from . import environments

__version__ = "0.1.0"
