"""Deterministic VP probability-flow baselines at a matched NFE budget.

SDEdit analog: noise the input to the SNR the bridge starts from, then
denoise with the target token. Dual-Bridge analog: invert with the source
token down to ``ALPHA_BAR_MIN``, then generate with the target token.
"""

from __future__ import annotations

import numpy as np

from .core import NoiseLevel, check_batch, per_sample_normal, snr_match
from .denoiser import SOURCE, TARGET, NULL, domain_token

ALPHA_BAR_MIN = 0.02
ALPHA_BAR_MAX = 0.999


class CountingModel:
    """Wraps a noise model and counts guided evaluations (one per NFE)."""

    def __init__(self, model):
        self.model = model
        self.n_evals = 0

    def guided_eps(self, y, level, c, omega):
        self.n_evals += 1
        ec = self.model.forward(y, level.alpha_bar, c, one_minus=level.one_minus)
        if omega == 1.0:
            return ec
        en = self.model.forward(y, level.alpha_bar, NULL, one_minus=level.one_minus)
        return (1 - omega) * en + omega * ec


def _level(ab):
    return ab if isinstance(ab, NoiseLevel) else NoiseLevel.from_alpha_bar(ab)


def pf_ode_step(model, y, level_from, level_to, c, omega=1.0, direction=None):
    """One deterministic denoising-step update between two VP levels.

    ``y' = sqrt(ab') x_hat + sqrt(1 - ab') eps`` with ``eps`` the guided noise
    prediction at ``(y, level_from)`` and ``x_hat`` its Tweedie estimate.
    ``direction`` may be ``"generate"`` (noise decreasing) or ``"invert"``.
    """
    src, dst = _level(level_from), _level(level_to)
    ab0, ab1 = float(src.alpha_bar), float(dst.alpha_bar)
    if direction == "generate" and ab1 < ab0:
        raise ValueError(f"generation step must not add noise ({ab0} -> {ab1})")
    if direction == "invert" and ab1 > ab0:
        raise ValueError(f"inversion step must not remove noise ({ab0} -> {ab1})")
    eps = _counter(model).guided_eps(y, src, domain_token(c), omega)
    if ab0 == ab1:
        return np.array(y, dtype=float, copy=True)
    x_hat = (y - np.sqrt(src.one_minus) * eps) / np.sqrt(src.alpha_bar)
    return np.sqrt(dst.alpha_bar) * x_hat + np.sqrt(dst.one_minus) * eps


def level_path(ab_from, ab_to, n_steps):
    """``n_steps + 1`` levels from ``ab_from`` to ``ab_to``, uniform in log-SNR.

    An endpoint at exactly 1 keeps its value; interior levels are spaced as
    if it were ``ALPHA_BAR_MAX``.
    """
    if ab_from == ab_to:
        return [NoiseLevel.from_alpha_bar(ab_from)] * (n_steps + 1)

    def logit(ab):
        ab = min(ab, ALPHA_BAR_MAX)
        return np.log(ab) - np.log1p(-ab)

    lams = np.linspace(logit(ab_from), logit(ab_to), n_steps + 1)
    levels = [NoiseLevel(1.0 / (1.0 + np.exp(-lam)), 1.0 / (1.0 + np.exp(lam))) for lam in lams]
    if ab_from == 1.0:
        levels[0] = NoiseLevel(1.0, 0.0)
    if ab_to == 1.0:
        levels[-1] = NoiseLevel(1.0, 0.0)
    return levels


def run_path(model, y, levels, c, omega, direction=None):
    for lf, lt in zip(levels[:-1], levels[1:]):
        y = pf_ode_step(model, y, lf, lt, c, omega, direction)
    return y


def sdedit_translate(x0, nfe, tau, t0, model, omega=1.0, seed=0, indices=None):
    """Forward-noise ``x0`` to the bridge's initial SNR, then denoise to the target.

    The ``nfe`` target-token steps end at ``alpha_bar = 1``. Pass a
    :class:`CountingModel` to observe the number of evaluations.
    """
    x0 = check_batch(x0, "x0")
    if int(nfe) != nfe or nfe < 1:
        raise ValueError(f"nfe must be an integer >= 1, got {nfe}")
    level, _ = snr_match(x0[:1], t0, tau)
    indices = np.arange(len(x0)) if indices is None else indices
    eps = per_sample_normal(seed, "sdedit/noise", indices, x0.shape[1])
    y = np.sqrt(level.alpha_bar) * x0 + np.sqrt(level.one_minus) * eps
    counter = _counter(model)
    return run_path(counter, y, level_path(level.alpha_bar, 1.0, int(nfe)), TARGET, omega,
                    direction="generate")


def dual_bridge_translate(x0, nfe, model, omega=1.0, alpha_bar_min=ALPHA_BAR_MIN,
                          source=SOURCE, target=TARGET):
    """Invert with the source token, then generate with the target token.

    Half of the (even) budget goes to each phase.
    """
    x0 = check_batch(x0, "x0")
    if int(nfe) != nfe or nfe < 2 or nfe % 2:
        raise ValueError(f"dual-bridge needs an even nfe >= 2, got {nfe}")
    half = int(nfe) // 2
    counter = _counter(model)
    z = run_path(counter, x0, level_path(1.0, alpha_bar_min, half), source, omega,
                 direction="invert")
    out = run_path(counter, z, level_path(alpha_bar_min, 1.0, half), target, omega,
                   direction="generate")
    return out


def _counter(model):
    return model if isinstance(model, CountingModel) else CountingModel(model)
