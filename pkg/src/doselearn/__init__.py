"""
Dimension reduction for individualised dose rules.

Two estimators of the subspace a dose rule depends on:

* :func:`fit_direct` alternates a kernel-ridge dose rule with Stiefel
  ascent of the empirical value;
* :func:`fit_pseudo_direct` minimises the kernel least-squares error of the
  reward fit, followed by :func:`second_stage_rule`.

The simulation settings, subspace and policy metrics and a campaign runner
live in :mod:`doselearn.dataset` and :mod:`doselearn.evaluation`.
"""

__version__ = "0.1.0"

from .dataset import (
    DataError,
    DoseTrial,
    GroundTruth,
    TrialSchema,
    generate_setting,
    load_trial,
    save_trial,
    true_mean_reward,
    true_optimal_dose,
)
from .direct import (
    DoseGrid,
    KernelRidgeRule,
    dose_grid,
    empirical_value,
    fit_direct,
    fit_kernel_ridge,
    gcv_select_lambda,
    pseudo_dose_targets,
)
from .evaluation import (
    ExperimentConfig,
    MetricSet,
    ipw_value_estimate,
    policy_metrics,
    run_experiment,
    subspace_metrics,
)
from .kernel import (
    BandwidthSpec,
    gaussian_kernel,
    nw_conditional_mean,
    nw_regress,
    product_kernel,
    silverman_bandwidth,
)
from .pseudo import GridKernelRule, fit_pseudo_direct, psi_objective, second_stage_rule
from .stiefel import (
    FitReport,
    OptimizerOptions,
    cayley_step,
    line_search,
    numeric_gradient,
    optimize_on_stiefel,
    random_orthonormal,
    skew_update_matrix,
)
