"""Sensitivity analysis for matched studies with continuous doses and binary outcomes."""

from .assignment import (
    AssignmentDistribution,
    ConfounderAllocation,
    SensitivityParameter,
    assignment_probabilities,
    logit_bound_margin,
    regularity_l,
    tv_from_uniform,
)
from .attributable import (
    StratumCandidate,
    TaeInstance,
    TaeTestResult,
    enumerate_compatible,
    pi_bar,
    separability_test,
    tae_confidence_set,
    test_tae_bnb,
    test_tae_enumeration,
)
from .design import (
    DesignParseError,
    LatticeElement,
    MatchedDesign,
    MatchedSet,
    StratumTable,
    design_element,
    lattice_join,
    lattice_leq,
    lattice_meet,
    load_design,
    parse_design,
    stratum_table,
    validate,
    write_design,
)
from .design_sensitivity import (
    DesignSensitivityResult,
    DgpSpec,
    PowerResult,
    phi_hat,
    sample_dgp,
    simulate_power,
    solve_design_sensitivity,
)
from .diagnostics import (
    BalanceReport,
    balance_randomization_test,
    balance_report,
    ks_two_sample,
    median_split_groups,
    smd,
)
from .hardness import (
    SignomialProgram,
    formulate_signomial,
    parse_signomial,
    serialize_signomial,
    verify_counterexample,
)
from .sharp_null import (
    CubeMaximizerResult,
    SharpNullResult,
    brute_force_worst_p,
    changepoint,
    moments_at_u,
    p_value_curve,
    worst_case_p_exact_mc,
    worst_case_p_normal,
)
from .statistics import (
    AdaptiveSpec,
    StatisticSpec,
    adaptive_p,
    evaluate,
    parse_statistic,
    per_stratum,
)

__version__ = "0.1.0"
