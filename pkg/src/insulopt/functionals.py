"""Boundary-flux cost, volume penalty and the penalized objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import Configuration, GridDomain, volume_excess
from .medium import Medium
from .solver import (FluxProfile, PotentialField, SolverSettings, flux_profile,
                     solve_potential)

NEGATIVE_FLUX_TOL = 1e-8


class FluxWarning(UserWarning):
    """Negative boundary flux: the potential is probably not converged."""


@dataclass(frozen=True)
class Profile:
    """Convex increasing cost profile: ``linear``, ``power`` (t^q) or ``exp`` (e^(beta t) - 1)."""

    kind: str = "linear"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "power", "exp"):
            raise ValueError(f"unknown profile {self.kind!r}")
        if self.kind == "power" and self.param < 1:
            raise ValueError("power profile needs q >= 1")
        if self.kind == "exp" and not self.param > 0:
            raise ValueError("exp profile needs beta > 0")

    @classmethod
    def parse(cls, text: str) -> "Profile":
        text = text.strip()
        if text == "linear":
            return cls("linear")
        name, _, arg = text.partition(":")
        if name in ("power", "exp") and arg:
            return cls(name, float(arg))
        raise ValueError(f"profile must be linear|power:<q>|exp:<beta>, got {text!r}")

    def __str__(self):
        return "linear" if self.kind == "linear" else f"{self.kind}:{self.param!r}"

    def __call__(self, t):
        t = np.asarray(t, float)
        if self.kind == "linear":
            return t
        if self.kind == "power":
            return np.maximum(t, 0.0) ** self.param
        return np.expm1(self.param * t)

    def derivative(self, t):
        t = np.asarray(t, float)
        if self.kind == "linear":
            return np.ones_like(t)
        if self.kind == "power":
            return self.param * np.maximum(t, 0.0) ** (self.param - 1)
        return self.param * np.exp(self.param * t)


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """Separable cost ``weight(X) * profile(t)`` on the body boundary.

    ``weight`` is either a constant or one value per body-boundary sample.
    """

    profile: Profile = Profile()
    weight: object = 1.0

    def weights_for(self, n: int) -> np.ndarray:
        w = np.asarray(self.weight, float)
        if w.ndim == 0:
            return np.full(n, float(w))
        if w.shape != (n,):
            raise ValueError(f"weight has {w.size} entries, boundary has {n} samples")
        return w

    def weight_ratio(self, n: int) -> float:
        w = self.weights_for(n)
        return float(w.max() / w.min())

    def check(self, n: int, t_max: float = 10.0) -> None:
        w = self.weights_for(n)
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        t = np.linspace(0.0, t_max, 201)
        g = self.profile(t)
        if np.any(np.diff(g) < 0) or np.any(np.diff(g, 2) < -1e-10):
            raise ValueError(f"profile {self.profile} is not convex increasing on [0, {t_max}]")

    def __call__(self, weights, t):
        return weights * self.profile(t)


@dataclass(frozen=True)
class PenaltyParams:
    lambda_pen: float
    iota: float

    def __post_init__(self):
        if not self.lambda_pen > 0:
            raise ValueError(f"lambda_pen must be positive, got {self.lambda_pen}")
        if not self.iota > 0:
            raise ValueError(f"iota must be positive, got {self.iota}")

    def check_against(self, grid: GridDomain) -> None:
        free_area = (grid.nx * grid.ny - np.count_nonzero(grid.body_mask)) * grid.h ** 2
        if self.iota >= free_area:
            raise ValueError(f"iota must be below the free box area {free_area:.6g}")


def flux_functional(nonlinearity: Nonlinearity, profile: FluxProfile) -> float:
    vals = np.asarray(profile.values, float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("flux profile contains non-finite values")
    if np.any(vals < -NEGATIVE_FLUX_TOL):
        warnings.warn(f"negative flux on the body boundary (min {vals.min():.3e}); solve may be unconverged",
                      FluxWarning, stacklevel=2)
    w = nonlinearity.weights_for(len(vals))
    return float(np.sum(w * nonlinearity.profile(vals) * profile.samples.weights))


def penalty(params: PenaltyParams, excess_volume: float) -> float:
    if excess_volume < 0:
        raise ValueError("excess volume must be nonnegative")
    return params.lambda_pen * max(excess_volume - params.iota, 0.0)


@dataclass(frozen=True, eq=False)
class Evaluation:
    J: float
    penalty: float
    J_lambda: float
    field: PotentialField
    excess: float
    flux: Optional[FluxProfile] = None

    def __iter__(self):
        return iter((self.J, self.penalty, self.J_lambda, self.field))


def penalized_objective(nonlinearity: Nonlinearity, params: PenaltyParams, grid: GridDomain, medium: Medium,
                        config: Configuration, phi, settings: SolverSettings = SolverSettings(),
                        initial=None) -> Evaluation:
    """Solve the potential on ``config`` and evaluate ``J``, the penalty and ``J + penalty``.

    The result unpacks as ``(J, penalty, J_lambda, field)``.
    """
    field = solve_potential(grid, medium, config, phi, settings, initial=initial)
    prof = flux_profile(grid, medium, field)
    J = flux_functional(nonlinearity, prof)
    ex = volume_excess(grid, config)
    pen = penalty(params, ex)
    return Evaluation(J, pen, J + pen, field, ex, prof)


@dataclass
class CoercivityTable:
    t: np.ndarray
    values: np.ndarray
    increasing: bool

    def rows(self):
        return list(zip(self.t.tolist(), self.values.tolist()))


def coercivity_probe(nonlinearity: Nonlinearity, t_grid, boundary) -> CoercivityTable:
    """Tabulate ``integral over the body boundary of weight * profile(t)`` for constant fluxes ``t``.

    ``boundary`` is the body-boundary sample set (``grid.boundary``).
    """
    t = np.asarray(t_grid, float)
    w = nonlinearity.weights_for(len(boundary)) * boundary.weights
    vals = np.array([float(np.sum(w * nonlinearity.profile(np.full(len(w), tk)))) for tk in t])
    inc = bool(np.all(np.diff(vals) > 0))
    if not inc:
        warnings.warn("coercivity table is not strictly increasing", RuntimeWarning, stacklevel=2)
    return CoercivityTable(t, vals, inc)
