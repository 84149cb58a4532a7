"""Regularized phase-penalty (Alt-Caffarelli type) minimization and the obstacle problem."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .grid import Configuration, GridDomain
from .medium import Medium
from .solver import (CellTerm, DiscreteEnergy, PotentialField, SolverSettings, _field_from,
                     as_data, build_stencil, data_range, minimize_energy, residual_measure,
                     solve_potential, _stencil_of)

FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool)


@dataclass(frozen=True)
class ACParams:
    """Phase penalty ``tau`` and smoothing width ``eps`` for the bump ``6t(1-t)`` on [0, 1]."""

    tau: float
    eps: float
    beta_kind: str = "quadratic-bump"

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def bump(t):
    t = np.asarray(t, float)
    return np.where((t >= 0) & (t <= 1), 6.0 * t * (1.0 - t), 0.0)


def beta_eps(params: ACParams, s):
    return bump(np.asarray(s, float) / params.eps) / params.eps


def B_eps(params: ACParams, s):
    """Primitive of the scaled bump: ``3x^2 - 2x^3`` with ``x = s/eps`` clipped to [0, 1]."""
    x = np.clip(np.asarray(s, float) / params.eps, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


class _PhaseTerm(CellTerm):
    def __init__(self, params: ACParams, scale: float):
        self.params = params
        self.scale = scale

    def value(self, u):
        return self.scale * B_eps(self.params, u)

    def first(self, u):
        return self.scale * beta_eps(self.params, u)

    def second(self, u):
        e = self.params.eps
        x = np.asarray(u, float) / e
        return self.scale * np.where((x >= 0) & (x <= 1), 6.0 * (1.0 - 2.0 * x) / e ** 2, 0.0)


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Domain on which a free-boundary problem is posed and the datum on the body boundary."""

    config: Configuration
    phi: Callable

    def __post_init__(self):
        object.__setattr__(self, "phi", as_data(self.phi))


def minimize_E_eps(grid: GridDomain, medium: Medium, params: ACParams, boundary_data: BoundaryData,
                   settings: SolverSettings = SolverSettings(), initial=None) -> PotentialField:
    """Minimize ``sum [a |grad f|^p + tau B_eps(f)] * area`` with ``f = phi`` on the body boundary.

    Starts from the potential (``tau = 0`` minimizer) unless ``initial`` is
    given.  The solve report's energies are the objective divided by ``p``.
    """
    lo, sup = data_range(grid, boundary_data.phi)
    if lo < 0:
        raise ValueError("boundary data must be nonnegative")
    cfg, phi = boundary_data.config, boundary_data.phi
    if initial is None:
        initial = solve_potential(grid, medium, cfg, phi, settings).values
    st = build_stencil(grid, cfg, phi, medium.coeff, theta_min=settings.theta_min)
    eta = settings.eta_for(grid, max(sup, 1e-300))
    term = _PhaseTerm(params, params.tau * grid.h ** 2 / medium.p)
    obj = DiscreteEnergy(st, medium.p, eta, term if params.tau > 0 else None)
    u0 = np.clip(st.gather(initial), 0.0, sup)
    u, report = minimize_energy(obj, u0, settings=settings)
    return _field_from(st, u, phi, cfg, medium.p, eta, report)


def minimize_E_tau(grid: GridDomain, medium: Medium, tau: float, boundary_data: BoundaryData,
                   settings: SolverSettings = SolverSettings(), eps_start: Optional[float] = None,
                   stages: Optional[list] = None) -> PotentialField:
    """Geometric continuation in ``eps`` (start ``0.1 sup phi``, halve until below ``h``).

    Each stage warm-starts from the previous one.  When ``stages`` is a list
    it receives ``(eps, field)`` for every stage.
    """
    _, sup = data_range(grid, boundary_data.phi)
    eps = 0.1 * sup if eps_start is None else float(eps_start)
    field = None
    while True:
        field = minimize_E_eps(grid, medium, ACParams(tau, eps), boundary_data, settings,
                               initial=None if field is None else field.values)
        if stages is not None:
            stages.append((eps, field))
        if eps < grid.h:
            return field
        eps *= 0.5


@dataclass(frozen=True, eq=False)
class ObstacleSpec:
    forbidden: np.ndarray

    def validate(self, grid: GridDomain) -> None:
        m = np.asarray(self.forbidden, bool)
        if m.shape != grid.shape:
            raise ValueError("forbidden mask shape does not match grid")
        if np.any(m & grid.body_mask):
            raise ValueError("forbidden set overlaps the body")
        ring = ndimage.binary_dilation(grid.body_mask, FOUR) & ~grid.body_mask
        if np.any(m & ring):
            raise ValueError("infeasible obstacle: forbidden set touches the Dirichlet ring around the body")


def solve_obstacle(grid: GridDomain, medium: Medium, phi, obstacle: ObstacleSpec,
                   settings: SolverSettings = SolverSettings()) -> PotentialField:
    """Minimize the energy over the whole box subject to ``f <= 0`` on the forbidden cells.

    Forbidden cells are unknowns without energy of their own, coupled through
    half-links to the cell faces; the upper bound is enforced by projection.
    The result is clipped to ``f >= 0``.
    """
    obstacle.validate(grid)
    phi = as_data(phi)
    lo, sup = data_range(grid, phi)
    if not lo > 0:
        raise ValueError("boundary datum must be positive")
    whole = Configuration(np.ones(grid.shape, bool))
    forbidden = np.asarray(obstacle.forbidden, bool)
    eta = settings.eta_for(grid, sup)

    def run(p, e, u0, tol=None):
        st = build_stencil(grid, whole, phi, medium.coeff, ghost=forbidden, theta_min=settings.theta_min)
        upper = np.full(st.n_var, np.inf)
        upper[st.n_energy:] = 0.0
        u, rep = minimize_energy(DiscreteEnergy(st, p, e), u0 if u0 is not None else np.zeros(st.n_var),
                                 upper=upper, settings=settings, tol=tol)
        return st, u, rep

    u0 = None
    if medium.p != 2:
        _, u0, _ = run(2.0, 0.0, None)
    st, u, report = run(medium.p, eta, u0)
    u = np.maximum(u, 0.0)
    return _field_from(st, u, phi, whole, medium.p, eta, report, ghost=forbidden)


@dataclass(frozen=True)
class Complementarity:
    value: float  # sum of b * (div A(grad b)) * h^2 off the body
    bound: float  # 10 * tol_residual * |{b > 0}|
    area: float

    @property
    def ok(self) -> bool:
        return abs(self.value) <= self.bound


def obstacle_complementarity(grid: GridDomain, medium: Medium, field: PotentialField) -> Complementarity:
    """Pairing of the solution with its residual measure over the unknowns.

    Flux through the outer box edge leaves the domain where the solution
    vanishes, so it does not enter the pairing.
    """
    res = residual_measure(grid, medium, field)
    st = _stencil_of(grid, medium, field)
    u = st.gather(field.values)
    force = -DiscreteEnergy(st, medium.p, field.eta).gradient(u)
    value = float(np.sum(np.maximum(u, 0.0) * force))
    b = field.values
    area = float(np.count_nonzero((b > 0) & ~grid.body_mask) * grid.h ** 2)
    return Complementarity(value, 10 * res.tol_residual * area, area)
