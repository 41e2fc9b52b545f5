"""Budgeted acquisition of labels and pairwise preferences for efficient inference.

Records can be bought fully labeled, with only a preference between two
model predictions, or not at all. The package picks the acquisition
propensities that minimise the estimated asymptotic variance under a budget,
and combines all three kinds of record into a cross-fitted estimator.
"""

__version__ = "0.1.0"

from .core import BudgetConfig, Dataset, MissingPattern, Record, preference_label, split_folds  # noqa: E402
from .eif import InfluenceSet, LeastSquares, Mean, phi_from_psi  # noqa: E402
from .policy import PolicyFunction, PolicyVector  # noqa: E402
from .allocate import (  # noqa: E402
    closed_form_loss_scalar,
    optimize_agnostic,
    optimize_aware,
    preference_worth_check,
    variance_functional,
)
from .sample import assign_patterns, spend_report  # noqa: E402
from .estimate import (  # noqa: E402
    EstimateReport,
    label_only_estimate,
    label_unlabel_estimate,
    pcal_ca_estimate,
    pcal_estimate,
)
from .sim import SimConfig, generate_linear_data, run_monte_carlo  # noqa: E402

__all__ = [
    "BudgetConfig", "Dataset", "MissingPattern", "Record", "preference_label", "split_folds",
    "InfluenceSet", "LeastSquares", "Mean", "phi_from_psi",
    "PolicyFunction", "PolicyVector",
    "closed_form_loss_scalar", "optimize_agnostic", "optimize_aware", "preference_worth_check",
    "variance_functional", "assign_patterns", "spend_report",
    "EstimateReport", "label_only_estimate", "label_unlabel_estimate", "pcal_ca_estimate", "pcal_estimate",
    "SimConfig", "generate_linear_data", "run_monte_carlo",
]
