"""Decomposed Schrodinger-bridge probability-flow ODE for unpaired translation.

Library layers, bottom up: schedules and seeding (:mod:`core`), couplings
(:mod:`coupling`), the conditional noise model (:mod:`denoiser`), predictor
backends (:mod:`predictors`), the solver (:mod:`bridge`), baselines
(:mod:`baselines`) and metrics (:mod:`metrics`). :mod:`estimators` wraps the
solvers in a fit/transform interface; :mod:`cli` drives file-backed runs.
"""

from .core import BridgeConfig, NoiseLevel, SbParams, sb_mu, sb_sigma, snr_match
from .coupling import CouplingPlan, SinkhornConfig, independent_coupling, sinkhorn
from .datasets import GaussianMixture, gen_toy
from .denoiser import ConditionalDenoiser, Mlp, TrainConfig, train
from .predictors import EmpiricalBayesPredictor, GaussianPredictor, VPPredictor
from .bridge import Trajectory, solve, velocity
from .baselines import dual_bridge_translate, pf_ode_step, sdedit_translate
from .metrics import avg_transport_cost, energy_distance, gaussian_frechet, sliced_wasserstein
from .estimators import DualBridgeTranslator, SchrodingerBridgeTranslator, SDEditTranslator

__version__ = "0.1.0"

__all__ = [
    "BridgeConfig", "NoiseLevel", "SbParams", "sb_mu", "sb_sigma", "snr_match",
    "CouplingPlan", "SinkhornConfig", "independent_coupling", "sinkhorn",
    "GaussianMixture", "gen_toy",
    "ConditionalDenoiser", "Mlp", "TrainConfig", "train",
    "EmpiricalBayesPredictor", "GaussianPredictor", "VPPredictor",
    "Trajectory", "solve", "velocity",
    "dual_bridge_translate", "pf_ode_step", "sdedit_translate",
    "avg_transport_cost", "energy_distance", "gaussian_frechet", "sliced_wasserstein",
    "DualBridgeTranslator", "SchrodingerBridgeTranslator", "SDEditTranslator",
]
