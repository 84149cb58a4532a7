"""Closed-form annulus solutions for a disk body with constant data and constant coefficient.

On the annulus ``r0 < r < R`` the radial p-harmonic function with
``u(r0) = phi`` and ``u(R) = 0`` is logarithmic for p = 2 and a power
``r^k``, ``k = (p-2)/(p-1)``, otherwise.  Among disks the penalized
objective is minimized either at the volume budget or, for small penalty
slopes, at the radius where the flux gain balances the penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .functionals import Profile


@dataclass(frozen=True)
class RadialProblem:
    r0: float
    phi: float = 1.0
    p: float = 2.0
    coeff: float = 1.0
    profile: Profile = Profile()
    weight: float = 1.0

    def __post_init__(self):
        if not (self.r0 > 0 and self.phi > 0 and self.p > 1 and self.coeff > 0 and self.weight > 0):
            raise ValueError("radial problem needs r0, phi, coeff, weight > 0 and p > 1")

    @property
    def k(self) -> float:
        return (self.p - 2.0) / (self.p - 1.0)

    def _check(self, R):
        if not R > self.r0:
            raise ValueError(f"outer radius {R} must exceed r0 = {self.r0}")

    def u(self, r, R: float):
        """Potential at radius r (clipped to 0 outside the annulus)."""
        self._check(R)
        r = np.clip(np.asarray(r, float), self.r0, R)
        if self.p == 2:
            return self.phi * np.log(R / r) / math.log(R / self.r0)
        k = self.k
        return self.phi * (R ** k - r ** k) / (R ** k - self.r0 ** k)

    def slope(self, r, R: float):
        """|u'(r)| on the annulus."""
        self._check(R)
        r = np.asarray(r, float)
        if self.p == 2:
            return self.phi / (r * math.log(R / self.r0))
        k = self.k
        return self.phi * abs(k) * r ** (k - 1) / abs(R ** k - self.r0 ** k)

    def flux_density(self, r, R: float):
        """Conormal flux ``a |u'|^(p-1)`` at radius r."""
        return self.coeff * self.slope(r, R) ** (self.p - 1)

    def flux_integral(self, R: float) -> float:
        return float(2 * math.pi * self.r0 * self.flux_density(self.r0, R))

    def J(self, R: float) -> float:
        return float(2 * math.pi * self.r0 * self.weight * self.profile(self.flux_density(self.r0, R)))

    def dJ(self, R: float) -> float:
        """Derivative of J with respect to the outer radius."""
        self._check(R)
        if self.p == 2:
            g = 1.0 / (R * math.log(R / self.r0))
        else:
            k = self.k
            g = k * R ** (k - 1) / (R ** k - self.r0 ** k)
        t = float(self.flux_density(self.r0, R))
        dt = -(self.p - 1) * g * t
        return float(2 * math.pi * self.r0 * self.weight * self.profile.derivative(t) * dt)

    def excess(self, R: float) -> float:
        return math.pi * (R * R - self.r0 * self.r0)

    def saturation_radius(self, iota: float) -> float:
        if not iota > 0:
            raise ValueError("iota must be positive")
        return math.sqrt(self.r0 ** 2 + iota / math.pi)

    def lambda0(self, iota: float) -> float:
        """Smallest penalty slope for which the budget disk is optimal among disks."""
        R = self.saturation_radius(iota)
        return -self.dJ(R) / (2 * math.pi * R)

    def optimal_radius(self, lam: float, iota: float) -> float:
        """Minimizer over disks of ``J(R) + lam (excess(R) - iota)^+``."""
        Rs = self.saturation_radius(iota)
        if lam >= self.lambda0(iota):
            return Rs

        def balance(R):
            return self.dJ(R) + lam * 2 * math.pi * R

        hi = Rs
        while balance(hi) < 0:
            hi *= 2
        lo = self.r0 * (1 + 1e-9)
        return brentq(balance, max(lo, Rs), hi, xtol=1e-14, rtol=1e-14)

    def objective(self, R: float, lam: float, iota: float) -> float:
        return self.J(R) + lam * max(self.excess(R) - iota, 0.0)


@dataclass
class OracleTable:
    problem: RadialProblem
    R: float
    lam: Optional[float]
    iota: float
    profile_rows: list  # (r, u, flux density, J)
    summary: list  # (key, value)


def oracle_table(problem: RadialProblem, iota: float, lam: Optional[float] = None, samples: int = 33) -> OracleTable:
    """Closed-form profile on the optimal disk and the scalar quantities the numerics are compared with."""
    R = problem.saturation_radius(iota) if lam is None else problem.optimal_radius(lam, iota)
    rs = np.linspace(problem.r0, R, samples)
    J = problem.J(R)
    rows = [(float(r), float(problem.u(r, R)), float(problem.flux_density(r, R)), J) for r in rs]
    Rs = problem.saturation_radius(iota)
    summary = [
        ("outer_radius", R),
        ("saturation_radius", Rs),
        ("flux_integral", problem.flux_integral(R)),
        ("J", J),
        ("excess", problem.excess(R)),
        ("lambda0", problem.lambda0(iota)),
        ("inner_slope", float(problem.slope(problem.r0, R))),
        ("outer_slope", float(problem.slope(R, R))),
        ("outer_flux_density", float(problem.flux_density(R, R))),
    ]
    if lam is not None:
        summary.append(("J_lambda", problem.objective(R, lam, iota)))
    return OracleTable(problem, R, lam, iota, rows, summary)
