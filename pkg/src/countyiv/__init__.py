"""Instrumental-variables analysis of two treatments with a county instrument."""

from .data import Codebook, Dataset, DataError, Schema, load_dataset, write_dataset
from .first_stage import fit_first_stage, relevance_test, exclusion_sensitivity, sensitivity_verdict
from .inference import bonferroni_level, bootstrap, placebo_regression
from .outcome import Theta, cond_prob, fit_outcome_model, loglik, outcome_data, period_effects, bound_effects
from .simulate import DgpConfig, simulate, oracle_effects
from .survival import SurvivalTheta, fit_survival, survival_curves, overall_effect, hazard_prob

__version__ = "0.1.0"
