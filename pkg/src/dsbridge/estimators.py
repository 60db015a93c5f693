"""Estimator front-ends for the bridge solver and the two baselines.

All three follow the transformer protocol: ``fit(X, y)`` with domain labels
(0 = source, 1 = target) prepares the predictors, ``transform(X)`` translates
source points.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baselines import ALPHA_BAR_MIN, CountingModel, dual_bridge_translate, sdedit_translate
from .bridge import solve
from .core import BridgeConfig, SbParams, check_batch
from .coupling import SinkhornConfig, independent_coupling, sinkhorn
from .datasets import GaussianMixture
from .denoiser import ConditionalDenoiser, Mlp, split_domains
from .predictors import EmpiricalBayesPredictor, GaussianPredictor, VPPredictor

BACKENDS = ("oracle", "analytic", "learned")


def _noise_model(denoiser):
    if isinstance(denoiser, ConditionalDenoiser):
        check_is_fitted(denoiser, "model_")
        return denoiser.model_
    if isinstance(denoiser, Mlp) or hasattr(denoiser, "forward"):
        return denoiser
    raise TypeError(f"cannot use {type(denoiser).__name__} as a noise model")


class _DenoiserMixin:
    """Shared handling of a prefit or freshly trained noise model."""

    def _fit_model(self, X, y):
        if self.denoiser is not None:
            self.model_ = _noise_model(self.denoiser)
        else:
            est = ConditionalDenoiser(steps=self.train_steps, seed=self.seed).fit(X, y)
            self.model_ = est.model_
            self.loss_history_ = est.loss_history_


class SchrodingerBridgeTranslator(_DenoiserMixin, TransformerMixin, BaseEstimator):
    """Unpaired translation with the decomposed bridge ODE.

    Parameters
    ----------
    backend : {"oracle", "analytic", "learned"}
        ``oracle`` uses empirical-Bayes predictors over a Sinkhorn plan with
        ``reg = 2 tau``, ``analytic`` the closed-form Gaussian-mixture
        posteriors under the product coupling, ``learned`` a conditional VP
        noise model through SNR matching.
    sqrt_tau, t0 : float
        Bridge noise scale and initial time.
    t_clamp : float
        Velocity times are clamped into ``[t_clamp, 1 - t_clamp]``.
    omega : float
        Guidance scale (learned backend only).
    nfe : int
        Predictor evaluations per sample, final denoising included.
    final_denoise, snr_matching, time_dependent_eps, guidance : bool
        Solver components; the last three only affect the learned backend.
    mixtures : pair of GaussianMixture, optional
        Source and target laws for the analytic backend. Single Gaussians
        are moment-fitted to the data when omitted.
    coupling : {"sinkhorn", "independent"}
        Plan used by the oracle backend.
    plan : CouplingPlan, optional
        Precomputed plan for the oracle backend; ``coupling`` is then ignored.
    denoiser : Mlp or fitted ConditionalDenoiser, optional
        Prefit noise model. Trained with ``train_steps`` when omitted.
    seed : int
        Root seed for the initial noise and any training.

    Attributes
    ----------
    predictors_ : PredictorSet
        Built at ``fit`` for the oracle and analytic backends.
    plan_ : CouplingPlan
        Oracle backend only.
    model_ : noise model
        Learned backend only.
    nfe_used_ : int
        Evaluations consumed per sample by the last ``transform``.
    """

    def __init__(self, backend="learned", sqrt_tau=2.5, t0=0.2, t_clamp=1e-3, omega=11.0,
                 nfe=8, final_denoise=True, snr_matching=True, time_dependent_eps=True,
                 guidance=True, mixtures=None, coupling="sinkhorn", plan=None,
                 sinkhorn_tol=1e-9, sinkhorn_max_iter=10000, denoiser=None,
                 train_steps=5000, seed=0):
        self.backend = backend
        self.sqrt_tau = sqrt_tau
        self.t0 = t0
        self.t_clamp = t_clamp
        self.omega = omega
        self.nfe = nfe
        self.final_denoise = final_denoise
        self.snr_matching = snr_matching
        self.time_dependent_eps = time_dependent_eps
        self.guidance = guidance
        self.mixtures = mixtures
        self.coupling = coupling
        self.plan = plan
        self.sinkhorn_tol = sinkhorn_tol
        self.sinkhorn_max_iter = sinkhorn_max_iter
        self.denoiser = denoiser
        self.train_steps = train_steps
        self.seed = seed

    @property
    def tau(self):
        return float(self.sqrt_tau) ** 2

    def _config(self):
        sb = SbParams(tau=self.tau, t0=self.t0, t_clamp=self.t_clamp)
        return BridgeConfig(sb=sb, omega=self.omega, nfe=self.nfe,
                            final_denoise=self.final_denoise, seed=self.seed)

    def fit(self, X, y):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        self._config()
        X0, X1 = split_domains(X, y)
        self.n_features_in_ = X0.shape[1]
        if self.backend == "oracle":
            if self.tau == 0:
                raise ValueError("the oracle backend needs tau > 0")
            if self.plan is not None:
                self.plan_ = self.plan
            elif self.coupling == "sinkhorn":
                cfg = SinkhornConfig.for_tau(self.tau, tol=self.sinkhorn_tol,
                                             max_iter=self.sinkhorn_max_iter)
                self.plan_ = sinkhorn(X0, X1, cfg)
            elif self.coupling == "independent":
                self.plan_ = independent_coupling(X0, X1)
            else:
                raise ValueError(f"unknown coupling {self.coupling!r}")
            self.predictors_ = EmpiricalBayesPredictor(self.plan_, self.tau)
        elif self.backend == "analytic":
            if self.mixtures is None:
                p0 = GaussianMixture.gaussian(X0.mean(0), np.cov(X0.T).reshape(X0.shape[1], -1))
                p1 = GaussianMixture.gaussian(X1.mean(0), np.cov(X1.T).reshape(X1.shape[1], -1))
            else:
                p0, p1 = self.mixtures
            self.predictors_ = GaussianPredictor(p0, p1, self.tau)
        else:
            self._fit_model(X, y)
            self.predictors_ = None
        return self

    def _predictors(self):
        if self.backend == "learned":
            return VPPredictor(self.model_, self.tau, self.omega,
                               snr_matching=self.snr_matching,
                               time_dependent_eps=self.time_dependent_eps,
                               guidance=self.guidance)
        return self.predictors_

    def translate(self, X, keep_states=False, indices=None):
        """Run the solver and return the full :class:`Trajectory`."""
        check_is_fitted(self, "n_features_in_")
        X = check_batch(X, "X", d=self.n_features_in_)
        traj = solve(X, self._config(), self._predictors(), keep_states=keep_states,
                     indices=indices)
        self.nfe_used_ = traj.nfe_used
        return traj

    def transform(self, X):
        return self.translate(X).final


class SDEditTranslator(_DenoiserMixin, TransformerMixin, BaseEstimator):
    """Noise to the bridge's initial SNR, then denoise with the target token.

    Parameters
    ----------
    sqrt_tau, t0 : float
        Fix the starting level ``1 / (t0 (1 - t0) tau + 1)``.
    omega : float
        Guidance scale.
    nfe : int
        Number of target-token denoising steps.
    denoiser, train_steps, seed
        As for :class:`SchrodingerBridgeTranslator`.
    """

    def __init__(self, sqrt_tau=2.5, t0=0.2, omega=1.0, nfe=8, denoiser=None,
                 train_steps=5000, seed=0):
        self.sqrt_tau = sqrt_tau
        self.t0 = t0
        self.omega = omega
        self.nfe = nfe
        self.denoiser = denoiser
        self.train_steps = train_steps
        self.seed = seed

    def fit(self, X, y):
        X0, _ = split_domains(X, y)
        self.n_features_in_ = X0.shape[1]
        self._fit_model(X, y)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_batch(X, "X", d=self.n_features_in_)
        counter = CountingModel(self.model_)
        out = sdedit_translate(X, self.nfe, float(self.sqrt_tau) ** 2, self.t0, counter,
                               omega=self.omega, seed=self.seed)
        self.nfe_used_ = counter.n_evals
        return out


class DualBridgeTranslator(_DenoiserMixin, TransformerMixin, BaseEstimator):
    """Invert with the source token, regenerate with the target token.

    Parameters
    ----------
    omega : float
        Guidance scale of both phases.
    nfe : int
        Even budget split equally between inversion and generation.
    alpha_bar_min : float
        Noise level reached by the inversion.
    denoiser, train_steps, seed
        As for :class:`SchrodingerBridgeTranslator`.
    """

    def __init__(self, omega=1.0, nfe=8, alpha_bar_min=ALPHA_BAR_MIN, denoiser=None,
                 train_steps=5000, seed=0):
        self.omega = omega
        self.nfe = nfe
        self.alpha_bar_min = alpha_bar_min
        self.denoiser = denoiser
        self.train_steps = train_steps
        self.seed = seed

    def fit(self, X, y):
        X0, _ = split_domains(X, y)
        self.n_features_in_ = X0.shape[1]
        self._fit_model(X, y)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_batch(X, "X", d=self.n_features_in_)
        counter = CountingModel(self.model_)
        out = dual_bridge_translate(X, self.nfe, counter, omega=self.omega,
                                    alpha_bar_min=self.alpha_bar_min)
        self.nfe_used_ = counter.n_evals
        return out
