"""Tabular offline RL under pessimism-modulated beliefs over dynamics."""

from .belief import (DirichletBelief, EnsembleBelief, bootstrap_ensemble, fit_dirichlet,
                     order_statistic_weights, pmdb_weights)
from .data import Dataset, DatasetRecord
from .mdp_core import TabularMDP, evaluate_policy_exact, value_iteration
from .pessimistic_eval import (FrozenSampleBank, PessimismConfig, equivalent_transition,
                               evaluate_policy_pessimistic, pessimistic_backup, sweep_monotonicity)
from .regularized_opt import RegularizationConfig, iterate_rpo, solve_regularized

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DatasetRecord", "DirichletBelief", "EnsembleBelief", "FrozenSampleBank",
    "PessimismConfig", "RegularizationConfig", "TabularMDP", "bootstrap_ensemble",
    "equivalent_transition", "evaluate_policy_exact", "evaluate_policy_pessimistic",
    "fit_dirichlet", "iterate_rpo", "order_statistic_weights", "pessimistic_backup",
    "pmdb_weights", "solve_regularized", "sweep_monotonicity", "value_iteration",
]
