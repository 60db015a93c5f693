"""Decomposed bridge ODE: velocity assembly and the Euler solver."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import BridgeConfig, check_batch, per_sample_normal, sb_sigma


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite state after Euler step {step}")
        self.step = step


def noise_coefficient(t, tau):
    """Weight ``(1/2 - t) sqrt(tau) / sqrt(t (1 - t))`` of the noise predictor."""
    return (0.5 - t) * np.sqrt(tau) / np.sqrt(t * (1.0 - t))


def velocity(preds, x_t, t, tau, t_clamp=1e-3):
    """Bridge ODE velocity ``c(t) eps_hat + x1_hat - x0_hat``.

    ``t`` must already lie in ``[t_clamp, 1 - t_clamp]``.
    """
    if not t_clamp - 1e-15 <= t <= 1.0 - t_clamp + 1e-15:
        raise ValueError(f"t={t} lies outside the clamp range [{t_clamp}, {1 - t_clamp}]")
    x0hat, x1hat, epshat = preds(x_t, t)
    return noise_coefficient(t, tau) * epshat + x1hat - x0hat


def init_state(x0, t0, tau, seed=0, indices=None):
    """Initial point ``(1 - t0) x0 + sqrt(t0 (1 - t0) tau) eps``.

    Row ``k`` draws its noise from the stream of sample ``indices[k]``
    (default ``0..n-1``), so results do not depend on batch partitioning.
    """
    x0 = check_batch(x0, "x0")
    if not 0 <= t0 < 1:
        raise ValueError(f"t0 must lie in [0, 1), got {t0}")
    if t0 == 0:
        return x0.copy()
    indices = np.arange(len(x0)) if indices is None else indices
    eps = per_sample_normal(seed, "bridge/init", indices, x0.shape[1])
    return (1 - t0) * x0 + sb_sigma(t0, tau) * eps


@dataclass
class Trajectory:
    """Euler grid times, optional state snapshots and the final batch.

    ``states[k]`` is the state held at ``times[k]``; with ``keep_states`` the
    final batch is ``states[-1]`` only when no final denoising was applied.
    """

    times: list
    final: np.ndarray
    states: list = field(default_factory=list)
    nfe_used: int = 0
    denoised: bool = False

    def to_csv(self, path):
        """Write rows ``(step, t, sample, x_1..x_d)``.

        The retained states come first; a denoised output follows as one more
        step at ``t = 1``.
        """
        d = self.final.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "sample"] + [f"x{k}" for k in range(d)])
            for step, (t, s) in enumerate(zip(self.times, self.states)):
                for i, row in enumerate(s):
                    w.writerow([step, repr(float(t)), i] + [repr(float(v)) for v in row])
            if self.states and not self.denoised:
                return
            for i, row in enumerate(self.final):
                w.writerow([len(self.states), "1.0", i] + [repr(float(v)) for v in row])


def time_grid(t0, n_steps):
    """Uniform grid ``t_i = t0 + (1 - t0) i / M`` for ``i = 0..M-1``."""
    return t0 + (1.0 - t0) * np.arange(n_steps) / n_steps


def solve(x0, cfg, preds, keep_states=False, indices=None):
    """Translate a source batch with the decomposed bridge ODE.

    Starts from :func:`init_state` at ``t0`` and takes ``M`` explicit Euler
    steps of size ``(1 - t0) / M`` where ``M = nfe - 1`` with the final
    denoising step and ``M = nfe`` without. Velocities are evaluated at
    ``t`` clamped into ``[t_clamp, 1 - t_clamp]``. The final denoising step
    returns the target prediction at the last grid time.
    """
    if not isinstance(cfg, BridgeConfig):
        raise TypeError("cfg must be a BridgeConfig")
    sb = cfg.sb
    tau = preds.tau
    if not np.isclose(tau, sb.tau):
        raise ValueError(f"predictors were built for tau={tau}, config has tau={sb.tau}")
    x = init_state(x0, sb.t0, tau, seed=cfg.seed, indices=indices)
    M = cfg.n_steps
    grid = time_grid(sb.t0, M)
    dt = (1.0 - sb.t0) / M
    states = []
    start = preds.n_evals
    for i, t in enumerate(grid):
        if keep_states:
            states.append(x.copy())
        tc = float(sb.clamp(t))
        x = x + dt * velocity(preds, x, tc, tau, sb.t_clamp)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(i + 1)
    times = list(grid)
    if keep_states:
        states.append(x.copy())
        times.append(1.0)
    if cfg.final_denoise:
        x = final_denoise(x, float(sb.clamp(grid[-1])), preds)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(M + 1)
    return Trajectory(times=times, final=x, states=states, nfe_used=preds.n_evals - start,
                      denoised=cfg.final_denoise)


def final_denoise(x_last, t_last, preds):
    """One predictor evaluation returning the target estimate at ``t_last``."""
    return preds.denoise(x_last, t_last)
