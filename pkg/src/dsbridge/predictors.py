"""Predictor triples ``(x0_hat, x1_hat, eps_hat)`` for the bridge velocity.

Three backends share one call signature ``preds(x_t, t)``:

* :class:`EmpiricalBayesPredictor` -- exact posterior means over a discrete
  coupling plan.
* :class:`GaussianPredictor` -- closed-form posterior means for Gaussian
  mixtures under the product coupling.
* :class:`VPPredictor` -- learned VP noise predictor plus SNR matching and
  Tweedie denoising, with classifier-free guidance.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .core import check_batch, sb_sigma, snr_match
from .denoiser import NULL, SOURCE, TARGET


class PosteriorUnderflowError(FloatingPointError):
    pass


class PredictorSet:
    """Base class; counts one evaluation per call (one NFE per sample)."""

    backend = "abstract"

    def __init__(self, tau):
        if not tau >= 0:
            raise ValueError(f"tau must be >= 0, got {tau}")
        self.tau = float(tau)
        self.n_evals = 0

    def __call__(self, x_t, t):
        x_t = check_batch(x_t, "x_t")
        self.n_evals += 1
        return self._predict(x_t, float(t))

    def _predict(self, x_t, t):
        raise NotImplementedError

    def x0hat(self, x_t, t):
        return self(x_t, t)[0]

    def x1hat(self, x_t, t):
        return self(x_t, t)[1]

    def epshat(self, x_t, t):
        return self(x_t, t)[2]

    def denoise(self, x_t, t):
        """Target-domain estimate used by the final denoising step."""
        return self(x_t, t)[1]


class EmpiricalBayesPredictor(PredictorSet):
    """Posterior means of ``(x0, x1, eps)`` given ``x_t`` over a coupling plan.

    Pair ``(i, j)`` has posterior weight proportional to
    ``w_ij * N(x_t; (1-t) x0_i + t x1_j, sigma_t^2 I)``, evaluated in log space.

    When the plan is a Sinkhorn plan solved at ``reg = 2 tau``, the
    ``x0_i . x1_j`` cross terms of the plan and of the Gaussian kernel cancel,
    so the pair posterior factorizes into independent source and target
    posteriors and costs ``O(n0 + n1)`` per query instead of ``O(n0 n1)``.
    Set ``factorize=False`` to force the dense evaluation.
    """

    backend = "oracle"
    max_block = 2_000_000

    def __init__(self, plan, tau, factorize=True):
        super().__init__(tau)
        self.plan = plan
        with np.errstate(divide="ignore"):
            self._log_w = np.log(plan.weights)
        self._sq0 = (plan.x0_atoms ** 2).sum(1)
        self._sq1 = (plan.x1_atoms ** 2).sum(1)
        pot = plan.log_potentials
        self.factorized = bool(
            factorize and pot is not None and np.isclose(pot[2], 2.0 * self.tau, rtol=1e-12)
        )

    def _predict(self, x_t, t):
        sigma = sb_sigma(t, self.tau)
        if not sigma > 0:
            raise ValueError(
                "empirical-Bayes predictors need sigma_t > 0 (interior t and tau > 0)"
            )
        var = sigma * sigma
        a, b = self.plan.x0_atoms, self.plan.x1_atoms
        if self.factorized:
            f, g, reg = self.plan.log_potentials
            # per-query constants |x|^2 / (2 var) cancel in the softmax
            bias0 = (f - self._sq0) / reg - (1 - t) ** 2 * self._sq0 / (2 * var)
            bias1 = (g - self._sq1) / reg - t ** 2 * self._sq1 / (2 * var)
            x0hat = _posterior_mean(x_t, a * ((1 - t) / var), bias0, a)
            x1hat = _posterior_mean(x_t, b * (t / var), bias1, b)
        else:
            x0hat, x1hat = self._dense(x_t, t, var)
        epshat = (x_t - (1 - t) * x0hat - t * x1hat) / sigma
        return x0hat, x1hat, epshat

    def _dense(self, x_t, t, var):
        a, b = self.plan.x0_atoms, self.plan.x1_atoms
        n0, n1 = self.plan.shape
        mu = ((1 - t) * a[:, None, :] + t * b[None, :, :]).reshape(n0 * n1, -1)
        log_w = self._log_w.ravel()
        keep = np.isfinite(log_w)
        mu, log_w = mu[keep], log_w[keep]
        rows = np.repeat(np.arange(n0), n1)[keep]
        cols = np.tile(np.arange(n1), n0)[keep]
        x0hat = np.empty_like(x_t)
        x1hat = np.empty_like(x_t)
        if len(mu) == 0:
            raise PosteriorUnderflowError("plan has no positive weights")
        bias = log_w - (mu * mu).sum(1) / (2 * var)
        targets = np.concatenate([a[rows], b[cols]], axis=1)
        d = x_t.shape[1]
        step = max(1, self.max_block // len(mu))
        for s in range(0, len(x_t), step):
            means = _posterior_mean(x_t[s:s + step], mu / var, bias, targets)
            x0hat[s:s + step] = means[:, :d]
            x1hat[s:s + step] = means[:, d:]
        return x0hat, x1hat


def _posterior_mean(x, scaled_atoms, bias, values):
    """Softmax-weighted mean of ``values`` with logits ``x . scaled_atoms + bias``."""
    logits = x @ scaled_atoms.T
    logits += bias
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    return (logits @ values) / logits.sum(axis=1, keepdims=True)


def _softmax_rows(logits):
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


class GaussianPredictor(PredictorSet):
    """Closed-form predictors for Gaussian mixtures under ``P0 x P1``.

    For component pair ``(a, b)`` the state is Gaussian with mean
    ``(1-t) m_a + t m_b`` and covariance ``(1-t)^2 S_a + t^2 S_b + sigma_t^2 I``;
    per-pair posterior means follow from joint-Gaussian conditioning and are
    mixed with the pair responsibilities. At ``sigma_t = 0`` the noise
    prediction is defined as 0.
    """

    backend = "analytic"

    def __init__(self, p0, p1, tau):
        super().__init__(tau)
        if p0.dim != p1.dim:
            raise ValueError("source and target mixtures have different dimensions")
        self.p0 = p0
        self.p1 = p1

    def _predict(self, x_t, t):
        sigma = sb_sigma(t, self.tau)
        d = self.p0.dim
        if x_t.shape[1] != d:
            raise ValueError(f"x_t has dimension {x_t.shape[1]}, mixtures have {d}")
        logits, means0, means1, noise = [], [], [], []
        for wa, ma, Sa in zip(self.p0.weights, self.p0.means, self.p0.covs):
            for wb, mb, Sb in zip(self.p1.weights, self.p1.means, self.p1.covs):
                m = (1 - t) * ma + t * mb
                C = (1 - t) ** 2 * Sa + t ** 2 * Sb + sigma ** 2 * np.eye(d)
                L = np.linalg.cholesky(C)
                r = x_t - m
                sol = np.linalg.solve(C, r.T).T  # C^-1 r per row
                z = np.linalg.solve(L, r.T)
                logdet = 2.0 * np.log(np.diag(L)).sum()
                logits.append(np.log(wa) + np.log(wb) - 0.5 * logdet - 0.5 * (z * z).sum(0))
                means0.append(ma + (1 - t) * sol @ Sa)
                means1.append(mb + t * sol @ Sb)
                noise.append(sigma * sol)
        resp = _softmax_rows(np.stack(logits, axis=1))
        x0hat = np.einsum("nk,knd->nd", resp, np.stack(means0))
        x1hat = np.einsum("nk,knd->nd", resp, np.stack(means1))
        epshat = np.einsum("nk,knd->nd", resp, np.stack(noise))
        return x0hat, x1hat, epshat


class VPPredictor(PredictorSet):
    """Predictors from a domain-conditioned VP noise model.

    The bridge state is mapped to the VP input with the same SNR, each domain
    prediction uses the guided noise ``(1 - omega) eps(y, null) + omega eps(y, c)``
    inside Tweedie's formula, and the noise prediction is the unguided
    source-token output for ``t < 0.5`` and target-token output otherwise.

    The ablation switches turn off SNR matching (``y = x_t``), the
    time-dependent noise predictor (source token throughout) and guidance
    (``omega = 1``).
    """

    backend = "learned"

    def __init__(self, model, tau, omega=11.0, snr_matching=True,
                 time_dependent_eps=True, guidance=True):
        super().__init__(tau)
        if model is None:
            raise ValueError("the learned backend needs a trained noise model")
        if not omega >= 0:
            raise ValueError(f"omega must be >= 0, got {omega}")
        self.model = model
        self.omega = float(omega)
        self.snr_matching = snr_matching
        self.time_dependent_eps = time_dependent_eps
        self.guidance = guidance

    @property
    def effective_omega(self):
        return self.omega if self.guidance else 1.0

    def _levels(self, x_t, t):
        level, y = snr_match(x_t, t, self.tau)
        if not self.snr_matching:
            y = x_t
        return level, y

    def _eps(self, y, level, c):
        return self.model.forward(y, level.alpha_bar, c, one_minus=level.one_minus)

    def _predict(self, x_t, t):
        level, y = self._levels(x_t, t)
        e0 = self._eps(y, level, SOURCE)
        e1 = self._eps(y, level, TARGET)
        w = self.effective_omega
        if w != 1.0:
            e_null = self._eps(y, level, NULL)
            g0 = (1 - w) * e_null + w * e0
            g1 = (1 - w) * e_null + w * e1
        else:
            g0, g1 = e0, e1
        x0hat = tweedie(y, g0, level)
        x1hat = tweedie(y, g1, level)
        use_target = self.time_dependent_eps and t >= 0.5
        epshat = e1 if use_target else e0
        return x0hat, x1hat, epshat


def tweedie(y, eps, level):
    """Posterior-mean denoising ``(y - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar)``."""
    return (y - np.sqrt(level.one_minus) * eps) / np.sqrt(level.alpha_bar)


def cfg_residual(model, tau, omega, x_t, t):
    """Norm of ``(x1_w - x0_w) - omega (x1 - x0)`` for the learned backend."""
    guided = VPPredictor(model, tau, omega)(x_t, t)
    plain = VPPredictor(model, tau, 1.0)(x_t, t)
    diff = (guided[1] - guided[0]) - omega * (plain[1] - plain[0])
    return float(np.sqrt((diff ** 2).sum(axis=1)).max())
