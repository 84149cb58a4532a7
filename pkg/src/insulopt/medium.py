"""The conductivity law ``A(X, xi) = a(X) |xi|^(p-2) xi`` and a randomized axiom checker."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .grid import GridDomain, collar


@dataclass(frozen=True, eq=False)
class Medium:
    """Power-law medium with a per-cell coefficient field.

    ``eta`` regularizes ``|xi|`` as ``sqrt(|xi|^2 + eta^2)``; it is only applied
    by :func:`eval_A` when ``p < 2``.
    """

    p: float
    coeff: np.ndarray
    ell_lo: Optional[float] = None
    ell_hi: Optional[float] = None
    hoelder_exponent: float = 1.0
    collar_smooth: bool = False
    eta: float = 0.0

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"exponent p must exceed 1, got {self.p}")
        coeff = np.asarray(self.coeff, float)
        if not np.all(np.isfinite(coeff)):
            raise ValueError("coefficient field must be finite")
        object.__setattr__(self, "coeff", coeff)
        if self.ell_lo is None:
            object.__setattr__(self, "ell_lo", float(coeff.min()))
        if self.ell_hi is None:
            object.__setattr__(self, "ell_hi", float(coeff.max()))
        if not 0 < self.hoelder_exponent <= 1:
            raise ValueError("hoelder_exponent must lie in (0, 1]")

    @classmethod
    def constant(cls, grid: GridDomain, p: float, value: float = 1.0, **kw) -> "Medium":
        return cls(p, np.full(grid.shape, float(value)), **kw)

    def coefficient(self, cell):
        """Coefficient at a cell given as ``(row, col)`` or flat index."""
        if isinstance(cell, tuple):
            return self.coeff[cell]
        return self.coeff.ravel()[cell]

    def with_eta(self, eta: float) -> "Medium":
        return replace(self, eta=float(eta))

    def validate(self) -> None:
        lo, hi = float(self.coeff.min()), float(self.coeff.max())
        if not self.ell_lo > 0:
            raise ValueError(f"ell_lo must be positive, got {self.ell_lo}")
        if lo < self.ell_lo or hi > self.ell_hi:
            raise ValueError(f"coefficient range [{lo}, {hi}] outside [{self.ell_lo}, {self.ell_hi}]")


def checkerboard_coeff(grid: GridDomain, v1: float, v2: float, period: int) -> np.ndarray:
    j, i = np.indices(grid.shape)
    return np.where(((i // period) + (j // period)) % 2 == 0, float(v1), float(v2))


def random_coeff(grid: GridDomain, lo: float, hi: float, seed: int) -> np.ndarray:
    """Piecewise-constant (per cell) random field, uniform in [lo, hi]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=grid.shape)


def smooth_collar(grid: GridDomain, medium: Medium, delta0: float) -> Medium:
    """Replace the coefficient on the collar of width ``delta0`` by its mean there."""
    band = collar(grid, delta0) | grid.body_mask
    coeff = medium.coeff.copy()
    coeff[band] = coeff[band].mean()
    return replace(medium, coeff=coeff, collar_smooth=True)


def is_collar_smooth(grid: GridDomain, medium: Medium, width: float) -> bool:
    band = collar(grid, min(width, 0.999 * grid.clearance)) | grid.body_mask
    vals = medium.coeff[band]
    return bool(np.ptp(vals) <= 1e-12 * max(1.0, abs(vals).max()))


def _check_xi(xi) -> np.ndarray:
    xi = np.asarray(xi, float)
    if xi.shape[-1] != 2:
        raise ValueError("xi must be a 2-vector (last axis of length 2)")
    if not np.all(np.isfinite(xi)):
        raise ValueError("xi must be finite")
    return xi


def _modulus(medium: Medium, xi: np.ndarray, eta):
    sq = np.sum(xi * xi, axis=-1)
    if medium.p < 2:
        e = medium.eta if eta is None else eta
        return sq + e * e
    return sq


def eval_A(medium: Medium, cell, xi, eta: Optional[float] = None) -> np.ndarray:
    """``a(X) |xi|^(p-2) xi``; vectorized over leading axes of ``xi`` (and of ``cell`` if an array)."""
    xi = _check_xi(xi)
    a = np.asarray(medium.coefficient(cell), float)
    m2 = _modulus(medium, xi, eta)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(m2 > 0, m2 ** ((medium.p - 2) / 2), 0.0)
    return (a * scale)[..., None] * xi


def energy_density(medium: Medium, cell, xi, eta: Optional[float] = None):
    """``<A(X, xi), xi>``, i.e. ``a |xi|^p`` (regularized for p < 2)."""
    xi = _check_xi(xi)
    return np.sum(eval_A(medium, cell, xi, eta) * xi, axis=-1)


@dataclass
class AxiomReport:
    passed: bool
    failures: list
    margins: dict = field(default_factory=dict)
    sample_count: int = 0

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL: " + ", ".join(self.failures)
        rows = ", ".join(f"{k}={v:.3e}" for k, v in self.margins.items())
        return f"axiom check ({self.sample_count} samples) {status}; {rows}"


HOMOGENEITY_TOL = 1e-12


def axiom_check(medium: Medium, sample_count: int = 1000, seed: int = 0) -> AxiomReport:
    """Randomized check of coercivity, boundedness, strict monotonicity and homogeneity.

    The extreme-coefficient cells are always part of the sample so that a
    single bad cell cannot be missed.
    """
    if sample_count < 100:
        raise ValueError("sample_count must be at least 100")
    rng = np.random.default_rng(seed)
    flat = medium.coeff.ravel()
    cells = rng.integers(0, flat.size, size=sample_count)
    cells[0] = int(np.argmin(flat))
    cells[1] = int(np.argmax(flat))
    p = medium.p

    def random_xi(n):
        mag = 10.0 ** rng.uniform(-3, 3, n)
        ang = rng.uniform(0, 2 * np.pi, n)
        return mag[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    xi = random_xi(sample_count)
    mod = np.linalg.norm(xi, axis=1)
    # the p<2 regularization is switched off so the axioms are tested on the law itself
    dens = energy_density(medium, cells, xi, eta=0.0)
    ratio = dens / mod ** p
    failures = []
    margins = {
        "coercivity": float(np.min(ratio - medium.ell_lo)),
        "boundedness": float(np.min(medium.ell_hi - np.linalg.norm(eval_A(medium, cells, xi, eta=0.0), axis=1) / mod ** (p - 1))),
    }
    tol = 1e-12 * max(1.0, medium.ell_hi)
    if not (medium.ell_lo > 0 and margins["coercivity"] >= -tol):
        failures.append("coercivity")
    if margins["boundedness"] < -tol:
        failures.append("boundedness")

    x1 = random_xi(sample_count)
    x2 = random_xi(sample_count)
    d = x1 - x2
    mono = np.sum((eval_A(medium, cells, x1, eta=0.0) - eval_A(medium, cells, x2, eta=0.0)) * d, axis=1)
    margins["monotonicity"] = float(np.min(mono))
    margins["monotonicity_ratio"] = float(np.min(mono / np.sum(d * d, axis=1)))
    if not np.all(mono > 0):
        failures.append("monotonicity")

    worst = 0.0
    base = eval_A(medium, cells, xi, eta=0.0)
    for alpha in (-2.0, -1.0, 0.5, 3.0):
        lhs = eval_A(medium, cells, alpha * xi, eta=0.0)
        rhs = alpha * abs(alpha) ** (p - 2) * base
        scale = np.maximum(np.linalg.norm(rhs, axis=1), 1e-300)
        worst = max(worst, float(np.max(np.linalg.norm(lhs - rhs, axis=1) / scale)))
    margins["homogeneity_residual"] = worst
    if worst >= HOMOGENEITY_TOL:
        failures.append("homogeneity")
    return AxiomReport(not failures, failures, margins, sample_count)
