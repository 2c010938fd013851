"""Multiply robust and doubly robust estimation of average potential outcomes
for multivalued treatments."""

from .data import Dataset, TreatmentGroup, load_csv, treatment_group, write_csv
from .elweights import build_constraints, mr_weights, solve_rho
from .estimators import ate, dr_apo, ipw_apo, mr_apo, parse_estimator, reg_apo
from .family import DEFAULT_FAMILY, ModelFamily, fit_family
from .glm import fit_binomial, fit_gaussian, predict_or
from .gps import GpsModel, gps_pmf, success_prob
from .sim import DgpSpec, ExperimentConfig, run_experiment, simulate_dataset, true_apo

__version__ = "0.1.0"
