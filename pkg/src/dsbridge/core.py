"""Bridge and VP schedules, SNR matching, configuration types and RNG streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

#: Default margin keeping velocity evaluations away from t in {0, 1}.
T_CLAMP = 1e-3


def sb_sigma(t, tau):
    """Standard deviation of the bridge path, ``sqrt(t (1 - t) tau)``.

    Works elementwise on arrays. ``t`` is expected in ``[0, 1]`` and ``tau >= 0``.
    """
    t = np.asarray(t, dtype=float)
    var = t * (1.0 - t) * tau
    out = np.sqrt(np.maximum(var, 0.0))
    return float(out) if out.ndim == 0 else out


def sb_mu(x0, x1, t):
    """Linear interpolation ``(1 - t) x0 + t x1`` between endpoints."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape[-1] != x1.shape[-1]:
        raise ValueError(
            f"dimension mismatch: x0 has {x0.shape[-1]} coords, x1 has {x1.shape[-1]}"
        )
    t = _column(t, x0)
    return (1.0 - t) * x0 + t * x1


@dataclass(frozen=True)
class NoiseLevel:
    """VP noise level ``alpha_bar`` stored with its complement.

    Keeping ``1 - alpha_bar`` separately avoids cancellation when the level is
    close to 1, where the SNR ``alpha_bar / (1 - alpha_bar)`` is large.
    """

    alpha_bar: np.ndarray | float
    one_minus: np.ndarray | float

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        om = np.asarray(self.one_minus, dtype=float)
        if np.any(~(ab > 0.0)) or np.any(ab > 1.0):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if np.any(om < 0.0) or np.any(om >= 1.0):
            raise ValueError("1 - alpha_bar must lie in [0, 1)")

    @classmethod
    def from_alpha_bar(cls, alpha_bar):
        ab = np.asarray(alpha_bar, dtype=float)
        return cls(_scalar(ab), _scalar(1.0 - ab))

    @classmethod
    def from_variance(cls, var):
        """Level whose SNR equals ``1 / var`` (``var`` = bridge variance)."""
        var = np.maximum(np.asarray(var, dtype=float), 0.0)
        return cls(_scalar(1.0 / (var + 1.0)), _scalar(var / (var + 1.0)))

    @property
    def snr(self):
        with np.errstate(divide="ignore"):
            return np.asarray(self.alpha_bar) / np.asarray(self.one_minus)


def snr_match(x_t, t, tau):
    """Map a bridge state onto the VP diffusion input with the same SNR.

    Returns ``(level, y)`` with ``level.alpha_bar = 1 / (sigma_t^2 + 1)`` and
    ``y = sqrt(alpha_bar) * x_t``, so the VP SNR equals ``sigma_t^-2``.
    ``t`` may be a scalar or one time per row of ``x_t``.
    """
    x_t = np.asarray(x_t, dtype=float)
    t = np.asarray(t, dtype=float)
    var = np.maximum(t * (1.0 - t) * tau, 0.0)
    level = NoiseLevel.from_variance(var)
    y = x_t / np.sqrt(_column(var, x_t) + 1.0)
    return level, y


def snr_identity_residual(t, tau):
    """Relative error of the matched VP SNR against ``sigma_t^-2``."""
    t = np.asarray(t, dtype=float)
    var = t * (1.0 - t) * tau
    level = NoiseLevel.from_variance(var)
    return np.abs(level.snr * var - 1.0)


def _scalar(a):
    return float(a) if np.ndim(a) == 0 else a


def _column(t, x):
    t = np.asarray(t, dtype=float)
    if t.ndim == 1 and x.ndim == 2:
        return t[:, None]
    return t


def check_batch(X, name="X", d=None):
    """Validate a sample batch: 2D, finite, at least one row."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be an n x d array, got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must have n >= 1 and d >= 1, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise ValueError(f"{name} has dimension {X.shape[1]}, expected {d}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


@dataclass(frozen=True)
class SbParams:
    tau: float = 6.25
    t0: float = 0.2
    t_clamp: float = T_CLAMP

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if not 0 <= self.t0 < 1:
            raise ValueError(f"t0 must lie in [0, 1), got {self.t0}")
        if not 0 < self.t_clamp < 0.5:
            raise ValueError(f"t_clamp must lie in (0, 0.5), got {self.t_clamp}")

    @classmethod
    def from_sqrt_tau(cls, sqrt_tau, t0=0.2, t_clamp=T_CLAMP):
        return cls(tau=float(sqrt_tau) ** 2, t0=t0, t_clamp=t_clamp)

    def clamp(self, t):
        return np.clip(t, self.t_clamp, 1.0 - self.t_clamp)


@dataclass(frozen=True)
class BridgeConfig:
    """Inputs of the decomposed bridge solver.

    ``nfe`` is the total number of predictor evaluations per sample; the
    optional final denoising step takes one of them.
    """

    sb: SbParams = field(default_factory=SbParams)
    omega: float = 11.0
    nfe: int = 8
    final_denoise: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.nfe) != self.nfe or self.nfe < 1:
            raise ValueError(f"nfe must be an integer >= 1, got {self.nfe}")
        if not self.omega >= 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if self.n_steps < 1:
            raise ValueError(
                "nfe=1 leaves no Euler step once the final denoising step is budgeted"
            )

    @property
    def n_steps(self):
        return self.nfe - (1 if self.final_denoise else 0)


def _label_key(label):
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed, purpose, index=None):
    """Independent generator for ``(seed, purpose[, index])``.

    Streams for different purposes or sample indices never overlap, so a
    sample's noise does not depend on how a batch is partitioned.
    """
    key = (_label_key(purpose),) if index is None else (_label_key(purpose), int(index))
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def per_sample_normal(seed, purpose, indices, d):
    """Standard normal rows, row ``k`` drawn from the stream of ``indices[k]``."""
    out = np.empty((len(indices), d))
    for k, i in enumerate(indices):
        out[k] = make_rng(seed, purpose, i).standard_normal(d)
    return out
