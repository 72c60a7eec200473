"""Preference-matching regularization for RLHF on finite response spaces."""

from .closed_form import (
    bias_curve,
    binary_rlhf_preference,
    conditional_pm_solution,
    f_div_binary_preference,
    kl_rlhf_solution,
    pm_rlhf_solution,
)
from .metrics import (
    MetricsReport,
    aggregate_pm_divergence,
    avg_length,
    entropy,
    instance_pm_divergence,
    kl_to_reference,
    perplexity,
)
from .optimizer import OptimizerConfig, PolicyOptimizer, SoftmaxPolicy, objective_gradient, optimize, pm_property_test
from .preference import (
    RankingPermutation,
    RewardTable,
    TabularPolicy,
    argmax_point_mass,
    btl_preference,
    conditional_preference,
    pl_ranking_prob,
    pm_policy,
    sample_distinct_pairs,
    total_variation,
)
from .regularizers import (
    ConditionalPMRegularizer,
    ConstantEpsilon,
    FDivRegularizer,
    KLRegularizer,
    NoRegularizer,
    PMRegularizer,
    RefCalibratedEpsilon,
    RegularSet,
    UniformPenalty,
    fenchel_duality_check,
    objective_value,
    pm_ode_residual,
    regularizer_value,
)
from .reward import BTLRewardModel, ComparisonDataset, fit_reward_mle, fit_reward_population, generate_comparisons, nll_loss
from .scenarios import __version__, run
from .sequence import (
    AutoregressivePolicy,
    Vocabulary,
    collapse_histogram,
    enumerate_responses,
    flatten_to_tabular,
    seq_log_prob,
)

__all__ = [
    "__version__",
    "aggregate_pm_divergence",
    "argmax_point_mass",
    "AutoregressivePolicy",
    "avg_length",
    "bias_curve",
    "binary_rlhf_preference",
    "btl_preference",
    "BTLRewardModel",
    "collapse_histogram",
    "ComparisonDataset",
    "conditional_pm_solution",
    "conditional_preference",
    "ConditionalPMRegularizer",
    "ConstantEpsilon",
    "entropy",
    "enumerate_responses",
    "f_div_binary_preference",
    "FDivRegularizer",
    "fenchel_duality_check",
    "fit_reward_mle",
    "fit_reward_population",
    "flatten_to_tabular",
    "generate_comparisons",
    "instance_pm_divergence",
    "kl_rlhf_solution",
    "kl_to_reference",
    "KLRegularizer",
    "MetricsReport",
    "nll_loss",
    "NoRegularizer",
    "objective_gradient",
    "objective_value",
    "optimize",
    "OptimizerConfig",
    "perplexity",
    "pl_ranking_prob",
    "pm_ode_residual",
    "pm_policy",
    "pm_property_test",
    "pm_rlhf_solution",
    "PMRegularizer",
    "PolicyOptimizer",
    "RankingPermutation",
    "RefCalibratedEpsilon",
    "regularizer_value",
    "RegularSet",
    "RewardTable",
    "run",
    "sample_distinct_pairs",
    "seq_log_prob",
    "SoftmaxPolicy",
    "TabularPolicy",
    "total_variation",
    "UniformPenalty",
    "Vocabulary",
]
