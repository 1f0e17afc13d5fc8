"""Conjugated discrete distributions for distributional RL.

Exact tabular operators (Bellman, distributional, conjugated, transformed),
the squared Cramer distance with gradients, and a small numpy C2D learner.
"""
from .mdp import (FiniteMdp, InvalidMdp, admissible_r_interval, build_counterexample, build_mdp, load_mdp,
                  random_mdp, sample_transition, save_mdp, stochastic_chain, validate)
from .measures import (DiscreteMeasure, DistributionCollection, MeasureError, cdf_eval, cramer_sq, cramer_sq_grad,
                       dirac, expectation, make_measure, merge_atoms, mixture, project_to_grid, pushforward)
from .operators import (IterationReport, bellman_backup, conjugated_backup, distributional_backup, fixed_point,
                        greedy_policy, initial_collection, q_from_collection, transformed_value_backup,
                        value_iteration, verify_counterexample)
from .trainer import TrainerConfig, TrainingError, train
from .transforms import DomainError, Homeomorphism, conjugate_map, h_forward, h_inverse

__version__ = "0.1.0"

__all__ = [
    "DiscreteMeasure", "DistributionCollection", "DomainError", "FiniteMdp", "Homeomorphism", "InvalidMdp",
    "IterationReport", "MeasureError", "TrainerConfig", "TrainingError", "admissible_r_interval", "bellman_backup",
    "build_counterexample", "build_mdp", "cdf_eval", "conjugate_map", "conjugated_backup", "cramer_sq",
    "cramer_sq_grad", "dirac", "distributional_backup", "expectation", "fixed_point", "greedy_policy", "h_forward",
    "h_inverse", "initial_collection", "load_mdp", "make_measure", "merge_atoms", "mixture", "project_to_grid",
    "pushforward", "q_from_collection", "random_mdp", "sample_transition", "save_mdp", "stochastic_chain", "train",
    "transformed_value_backup", "validate", "value_iteration", "verify_counterexample",
]
