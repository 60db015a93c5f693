"""Seeded 2D toy distributions used as stand-ins for image domains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import make_rng


@dataclass(frozen=True)
class GaussianMixture:
    """Finite Gaussian mixture in ``d`` dimensions.

    Parameters
    ----------
    weights : array of shape (k,)
    means : array of shape (k, d)
    covs : array of shape (k, d, d), positive definite
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        c = np.asarray(self.covs, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if len(w) != len(m) or len(m) != len(c):
            raise ValueError("weights, means and covs must have the same length")
        if c.shape[1:] != (m.shape[1], m.shape[1]):
            raise ValueError(f"covariance shape {c.shape[1:]} does not match d={m.shape[1]}")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        for ci in c:
            if not np.allclose(ci, ci.T) or np.linalg.eigvalsh(ci).min() <= 0:
                raise ValueError("mixture covariances must be symmetric positive definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(len(mean))
        return cls(np.ones(1), mean[None], cov[None])

    @classmethod
    def isotropic(cls, means, var, weights=None):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k, d = means.shape
        w = np.full(k, 1.0 / k) if weights is None else weights
        return cls(w, means, np.repeat(var * np.eye(d)[None], k, axis=0))

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def mean(self):
        return self.weights @ self.means

    @property
    def cov(self):
        m = self.mean
        dev = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum(
            "k,ki,kj->ij", self.weights, dev, dev
        )

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chol = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def _eight_gaussians(n, rng):
    angles = np.arange(8) * np.pi / 4
    centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    idx = rng.integers(0, 8, size=n)
    return centers[idx] + 0.2 * rng.standard_normal((n, 2))


def _two_moons(n, rng):
    # moons of radius 1 centred at (0, 0) and (1, 0.5), shifted to zero mean
    upper = rng.random(n) < 0.5
    theta = np.pi * rng.random(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x - 0.5, y - 0.25], axis=1)
    return pts + 0.05 * rng.standard_normal((n, 2))


def _checkerboard(n, rng):
    x1 = rng.random(n) * 4 - 2
    col = rng.integers(0, 2, size=n) * 2 - 2
    x2 = rng.random(n) + col + (np.floor(x1) % 2)
    return np.stack([x1, x2], axis=1)


def _swiss_roll_2d(n, rng):
    t = 1.5 * np.pi * (1 + 2 * rng.random(n))
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / 5.0
    return pts + 0.05 * rng.standard_normal((n, 2))


#: Two-domain task: shifted two-component mixtures (desk-scale cat/dog analog).
BLOBS_A = GaussianMixture.isotropic([[-2.0, -1.0], [-2.0, 1.0]], 0.15)
BLOBS_B = GaussianMixture.isotropic([[2.0, -1.5], [2.0, 1.5]], 0.15)

_GENERATORS = {
    "eight-gaussians": _eight_gaussians,
    "two-moons": _two_moons,
    "checkerboard": _checkerboard,
    "swiss-roll-2d": _swiss_roll_2d,
    "blobs-a": lambda n, rng: BLOBS_A.sample(n, rng),
    "blobs-b": lambda n, rng: BLOBS_B.sample(n, rng),
}

DATASETS = tuple(_GENERATORS) + ("gaussian",)


def parse_gaussian(name):
    """Parse ``gaussian`` or ``gaussian:mx,my:var`` into a mixture."""
    parts = name.split(":")
    if parts[0] != "gaussian" or len(parts) not in (1, 3):
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if len(parts) == 1:
        return GaussianMixture.gaussian(np.zeros(2), 1.0)
    mean = [float(v) for v in parts[1].split(",")]
    return GaussianMixture.gaussian(mean, float(parts[2]))


def check_name(name):
    """Raise ``ValueError`` unless ``name`` is a known dataset id."""
    if name not in _GENERATORS:
        parse_gaussian(name)


def gen_toy(name, n, seed=0, stream=""):
    """Draw ``n`` i.i.d. points from a named toy distribution.

    ``name`` is one of ``eight-gaussians``, ``two-moons``, ``checkerboard``,
    ``swiss-roll-2d``, ``blobs-a``, ``blobs-b``, ``gaussian`` (standard normal)
    or ``gaussian:mx,my:var``. A :class:`GaussianMixture` is also accepted.
    A non-empty ``stream`` selects an independent draw for the same seed.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    label = name if isinstance(name, str) else "mixture"
    rng = make_rng(seed, f"data/{label}/{stream}" if stream else f"data/{label}")
    if isinstance(name, GaussianMixture):
        return name.sample(int(n), rng)
    if name in _GENERATORS:
        return _GENERATORS[name](int(n), rng)
    return parse_gaussian(name).sample(int(n), rng)


def mixture_for(name):
    """Analytic mixture for a dataset name, or None when it has no closed form."""
    if isinstance(name, GaussianMixture):
        return name
    if name == "blobs-a":
        return BLOBS_A
    if name == "blobs-b":
        return BLOBS_B
    if name.startswith("gaussian"):
        return parse_gaussian(name)
    return None
