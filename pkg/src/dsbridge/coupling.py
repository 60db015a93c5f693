"""Discrete couplings between two uniformly weighted point clouds."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .core import check_batch


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, n_iter, violation):
        super().__init__(
            f"Sinkhorn did not converge after {n_iter} iterations "
            f"(marginal L1 violation {violation:.3e})"
        )
        self.n_iter = n_iter
        self.violation = violation


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.

    ``scaling`` in (0, 1) anneals the regularization geometrically from the
    largest cost down to ``reg``, warm-starting each stage from the previous
    potentials. Annealing only runs when the largest cost exceeds
    ``anneal_ratio * reg``, where plain iterations stall; ``scaling=None``
    always solves at ``reg`` directly. Intermediate stages stop
    at ``max(tol, stage_tol)`` or after ``stage_iter`` iterations;
    ``max_iter`` bounds the final stage.
    """

    reg: float = 2.0
    max_iter: int = 10_000
    tol: float = 1e-9
    scaling: float | None = 0.5
    stage_iter: int = 1000
    stage_tol: float = 1e-4
    anneal_ratio: float = 100.0

    def __post_init__(self):
        if not self.reg > 0:
            raise ValueError(f"reg must be > 0, got {self.reg}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.scaling is not None and not 0 < self.scaling < 1:
            raise ValueError(f"scaling must lie in (0, 1), got {self.scaling}")

    @classmethod
    def for_tau(cls, tau, **kwargs):
        """Config whose plan approximates the bridge coupling at variance ``tau``."""
        return cls(reg=2.0 * tau, **kwargs)


@dataclass(frozen=True, eq=False)
class CouplingPlan:
    """Joint weights over source atoms (rows) and target atoms (columns).

    ``log_potentials`` is set for Sinkhorn plans: ``(f, g, reg)`` with
    ``log weights[i, j] = (f[i] + g[j] - |x0_i - x1_j|^2) / reg``.
    """

    x0_atoms: np.ndarray
    x1_atoms: np.ndarray
    weights: np.ndarray
    log_potentials: tuple | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.x0_atoms), len(self.x1_atoms)):
            raise ValueError(
                f"weights shape {w.shape} does not match atom counts "
                f"({len(self.x0_atoms)}, {len(self.x1_atoms)})"
            )
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("plan weights must be finite and nonnegative")
        for name in ("x0_atoms", "x1_atoms", "weights"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return self.weights.shape

    def marginal_violation(self):
        """L1 distance of row and column sums from the uniform marginals."""
        n0, n1 = self.shape
        rows = np.abs(self.weights.sum(axis=1) - 1.0 / n0).sum()
        cols = np.abs(self.weights.sum(axis=0) - 1.0 / n1).sum()
        return float(rows + cols)

    def entropy(self):
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())

    def transpose(self):
        """Same coupling with source and target roles swapped."""
        pot = None
        if self.log_potentials is not None:
            f, g, reg = self.log_potentials
            pot = (g, f, reg)
        return CouplingPlan(self.x1_atoms, self.x0_atoms, self.weights.T, pot)

    def save(self, path):
        """Write atoms and weights to a ``.npz`` dump."""
        extra = {}
        if self.log_potentials is not None:
            f, g, reg = self.log_potentials
            extra = {"f": f, "g": g, "reg": np.array(reg)}
        with open(path, "wb") as fh:
            np.savez(fh, x0_atoms=self.x0_atoms, x1_atoms=self.x1_atoms,
                     weights=self.weights, **extra)

    @classmethod
    def load(cls, path):
        with np.load(Path(path)) as data:
            pot = None
            if "f" in data:
                pot = (data["f"], data["g"], float(data["reg"]))
            return cls(data["x0_atoms"], data["x1_atoms"], data["weights"], pot)


def squared_distances(a, b):
    """Pairwise squared Euclidean distances, shape (len(a), len(b))."""
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def sinkhorn(x0s, x1s, cfg=None):
    """Entropic OT plan between uniform empirical measures, log-domain.

    Minimizes ``<P, C> - reg * H(P)`` with ``C`` the squared Euclidean cost
    over couplings with uniform marginals. Dual potentials are updated in
    log-space every iteration, so small ``reg`` does not underflow. With
    ``cfg.scaling`` set, the regularization is annealed down to ``reg``.

    Raises
    ------
    SinkhornConvergenceError
        If the marginal L1 violation is still above ``cfg.tol`` after
        ``cfg.max_iter`` final-stage iterations.
    """
    cfg = SinkhornConfig() if cfg is None else cfg
    x0s = check_batch(x0s, "x0s")
    x1s = check_batch(x1s, "x1s", d=x0s.shape[1])
    n0, n1 = len(x0s), len(x1s)
    C = squared_distances(x0s, x1s)
    f = np.zeros(n0)
    g = np.zeros(n1)
    regs = [cfg.reg]
    if cfg.scaling is not None and C.max() > cfg.anneal_ratio * cfg.reg:
        r = C.max()
        while r > cfg.reg:
            regs.insert(-1, r)
            r *= cfg.scaling
    for k, reg in enumerate(regs):
        final = k == len(regs) - 1
        f, g, violation, ok = _sinkhorn_stage(
            C, f, g, reg, cfg.tol if final else max(cfg.tol, cfg.stage_tol),
            cfg.max_iter if final else cfg.stage_iter)
    if not ok:
        raise SinkhornConvergenceError(cfg.max_iter, violation)
    weights = np.exp((f[:, None] + g[None, :] - C) / cfg.reg)
    return CouplingPlan(x0s, x1s, weights, (f, g, cfg.reg))


def _sinkhorn_stage(C, f, g, reg, tol, max_iter):
    n0, n1 = C.shape
    log_a = -np.log(n0)
    log_b = -np.log(n1)
    violation = np.inf
    for it in range(1, max_iter + 1):
        f = reg * (log_a - logsumexp((g[None, :] - C) / reg, axis=1))
        g = reg * (log_b - logsumexp((f[:, None] - C) / reg, axis=0))
        # columns are exact after the g update; only rows can be off
        if it % 10 == 0 or it == max_iter:
            log_p = (f[:, None] + g[None, :] - C) / reg
            row = np.exp(logsumexp(log_p, axis=1))
            violation = np.abs(row - 1.0 / n0).sum()
            if violation <= tol:
                return f, g, violation, True
    return f, g, violation, False


def independent_coupling(x0s, x1s):
    """Product coupling: every pair gets weight ``1 / (n0 n1)``."""
    x0s = check_batch(x0s, "x0s")
    x1s = check_batch(x1s, "x1s", d=x0s.shape[1])
    n0, n1 = len(x0s), len(x1s)
    return CouplingPlan(x0s, x1s, np.full((n0, n1), 1.0 / (n0 * n1)))


def sample_pairs(plan, k, rng):
    """Draw ``k`` i.i.d. pairs ``(x0, x1)`` with probabilities ``plan.weights``."""
    p = plan.weights.ravel()
    idx = rng.choice(p.size, size=k, p=p / p.sum())
    i, j = np.divmod(idx, plan.shape[1])
    return plan.x0_atoms[i], plan.x1_atoms[j]


def transport_cost(plan):
    """Expected squared displacement ``sum_ij w_ij |x0_i - x1_j|^2``."""
    return float((plan.weights * squared_distances(plan.x0_atoms, plan.x1_atoms)).sum())
