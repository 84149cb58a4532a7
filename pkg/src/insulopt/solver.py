"""Potentials of the power-law medium on cut-cell grids.

Discretization
--------------
Every unknown cell owns four half-links (east, west, north, south).  A link
to another unknown cell has difference length ``h`` and weight length
``h/2``; a link that crosses a boundary at fraction ``theta`` of the way to
the neighbouring center ends on the boundary value, with difference and
weight length ``theta*h``.  Crossings with the body are located exactly (disk,
polygon); crossings with the free boundary come from the level set when one
is present and sit on the cell face (``theta = 1/2``) otherwise.

With ``L = sum of weight lengths`` the cell carries area ``h*L/2`` and the
squared gradient ``q = sum_d (2 w_d / L) s_d^2`` of its link slopes ``s_d``.
The discrete energy is ``sum_cells a/p (q + eta^2)^(p/2) * area``; for p = 2
this is the classical symmetric second-order Dirichlet scheme and for any p
it is convex in the unknowns.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .grid import Configuration, GridDomain, collar
from .medium import Medium, is_collar_smooth

THETA_MIN = 0.02
# (row step, column step) for east, west, north, south
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))
LINK_INTERIOR, LINK_BODY, LINK_OUTER, LINK_EDGE, LINK_GHOST = range(5)


class SolverError(RuntimeError):
    """Raised when a descent fails; carries the ``(iter, energy, grad_norm)`` history."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-9  # relative to the initial energy
    max_iter: int = 500
    eta: Optional[float] = None  # None: 1e-8 * sup(phi) / h
    armijo: float = 1e-4
    theta_min: float = THETA_MIN

    def eta_for(self, grid: GridDomain, phi_sup: float) -> float:
        return 1e-8 * phi_sup / grid.h if self.eta is None else float(self.eta)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    energy: float
    tol: float
    converged: bool
    history: list = field(default_factory=list)

    @property
    def tol_residual(self) -> float:
        return self.tol


@dataclass(frozen=True, eq=False)
class PotentialField:
    values: np.ndarray
    phi: Callable
    config: Configuration
    p: float
    eta: float
    solve_report: Optional[SolveReport] = None
    ghost: Optional[np.ndarray] = None  # cells held as obstacle unknowns

    @property
    def config_ref(self) -> Configuration:
        return self.config

    def with_values(self, values) -> "PotentialField":
        return replace(self, values=np.asarray(values, float), solve_report=None)


# ---------------------------------------------------------------------------
# boundary data


class ConstantData:
    """Constant Dirichlet datum usable as ``phi(x, y)``."""

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, x, y):
        return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, self.value)

    def __repr__(self):
        return f"const:{self.value!r}"


class AngularData:
    """``base + amp * cos(k * angle)`` about a center."""

    def __init__(self, base: float, amp: float, k: int, center=(0.0, 0.0)):
        self.base, self.amp, self.k, self.center = float(base), float(amp), int(k), tuple(center)

    def __call__(self, x, y):
        ang = np.arctan2(np.asarray(y) - self.center[1], np.asarray(x) - self.center[0])
        return self.base + self.amp * np.cos(self.k * ang)

    def __repr__(self):
        return f"cos:{self.base!r},{self.amp!r},{self.k}"


class ScaledData:
    def __init__(self, inner: Callable, factor: float):
        self.inner, self.factor = inner, float(factor)

    def __call__(self, x, y):
        return self.factor * np.asarray(self.inner(x, y), float)


def as_data(phi) -> Callable:
    if callable(phi):
        return phi
    return ConstantData(float(phi))


def data_range(grid: GridDomain, phi) -> tuple:
    vals = as_data(phi)(grid.boundary.points[:, 0], grid.boundary.points[:, 1])
    return float(np.min(vals)), float(np.max(vals))


# ---------------------------------------------------------------------------
# link stencil


@dataclass(eq=False)
class Stencil:
    """Half-link geometry of one configuration; arrays of shape ``(n_cells, 4)``."""

    grid: GridDomain
    var_cells: np.ndarray  # flat indices; the first n_energy own energy
    n_energy: int
    kind: np.ndarray
    nbr_var: np.ndarray
    nbr_cell: np.ndarray
    bval: np.ndarray
    ld: np.ndarray
    lw: np.ndarray
    coeff: np.ndarray
    area: np.ndarray
    weight: np.ndarray
    G: sp.csr_matrix
    s0: np.ndarray

    @property
    def n_var(self) -> int:
        return len(self.var_cells)

    @property
    def energy_cells(self) -> np.ndarray:
        return self.var_cells[: self.n_energy]

    def slopes(self, u: np.ndarray) -> np.ndarray:
        return (self.G @ u + self.s0).reshape(self.n_energy, 4)

    def gather(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, float).ravel()[self.var_cells]

    def scatter(self, u: np.ndarray, fill=0.0) -> np.ndarray:
        out = np.full(self.grid.nx * self.grid.ny, fill, float)
        out[self.var_cells] = u
        return out.reshape(self.grid.shape)


def build_stencil(grid: GridDomain, config: Configuration, phi, coeff: np.ndarray,
                  ghost: Optional[np.ndarray] = None, theta_min: float = THETA_MIN) -> Stencil:
    phi = as_data(phi)
    body = grid.body_mask
    ny, nx, h = grid.ny, grid.nx, grid.h
    ghost = np.zeros(grid.shape, bool) if ghost is None else np.asarray(ghost, bool) & ~body
    energy_mask = config.occupancy & ~body & ~ghost
    # ghosts only matter where they touch an energy cell
    near = ndimage.binary_dilation(energy_mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool))
    ghost = ghost & near
    er, ec = np.nonzero(energy_mask)
    gr, gc = np.nonzero(ghost)
    rows = np.concatenate([er, gr])
    cols = np.concatenate([ec, gc])
    var_cells = rows * nx + cols
    n_e = len(er)
    index = np.full(grid.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(len(rows))

    X, Y = grid.centers
    ls = config.level_set
    kind = np.empty((n_e, 4), np.int8)
    nbr_var = np.full((n_e, 4), -1, np.int64)
    nbr_cell = np.full((n_e, 4), -1, np.int64)
    bval = np.zeros((n_e, 4))
    theta = np.ones((n_e, 4))
    for k, (dr, dc) in enumerate(DIRECTIONS):
        nr, nc = er + dr, ec + dc
        inside = (nr >= 0) & (nr < ny) & (nc >= 0) & (nc < nx)
        nrc = np.where(inside, nr, 0)
        ncc = np.where(inside, nc, 0)
        kd = np.full(n_e, LINK_OUTER, np.int8)
        kd[~inside] = LINK_EDGE
        is_body = inside & body[nrc, ncc]
        is_ghost = inside & ghost[nrc, ncc]
        is_int = inside & energy_mask[nrc, ncc]
        kd[is_body] = LINK_BODY
        kd[is_ghost] = LINK_GHOST
        kd[is_int] = LINK_INTERIOR
        kind[:, k] = kd
        nbr_cell[inside, k] = (nrc * nx + ncc)[inside]
        linked = is_int | is_ghost
        nbr_var[linked, k] = index[nrc[linked], ncc[linked]]
        t = np.full(n_e, 0.5)
        t[is_int] = 1.0
        if np.any(is_body):
            x0, y0 = X[er[is_body], ec[is_body]], Y[er[is_body], ec[is_body]]
            x1, y1 = X[nrc[is_body], ncc[is_body]], Y[nrc[is_body], ncc[is_body]]
            tb = grid.body_crossing(x0, y0, x1, y1)
            t[is_body] = tb
            bval[is_body, k] = phi(x0 + tb * (x1 - x0), y0 + tb * (y1 - y0))
        outer = kd == LINK_OUTER
        if ls is not None and np.any(outer):
            l0 = ls[er[outer], ec[outer]]
            l1 = ls[nrc[outer], ncc[outer]]
            ok = (l0 >= 0) & (l1 < 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                tl = np.where(ok, l0 / (l0 - l1), 0.5)
            t[outer] = tl
        boundary = ~is_int
        t[boundary] = np.clip(t[boundary], theta_min, 1.0)
        theta[:, k] = t

    interior = kind == LINK_INTERIOR
    ld = np.where(interior, h, theta * h)
    lw = np.where(interior, 0.5 * h, theta * h)
    L = lw.sum(axis=1)
    area = 0.5 * h * L
    weight = 2.0 * lw / L[:, None]
    coeff_e = np.asarray(coeff, float)[er, ec]

    # sparse slope operator: s = G u + s0
    link = np.arange(4 * n_e)
    own = np.repeat(np.arange(n_e), 4)
    inv = 1.0 / ld.ravel()
    nv = nbr_var.ravel()
    has = nv >= 0
    G = sp.csr_matrix(
        (np.concatenate([-inv, inv[has]]), (np.concatenate([link, link[has]]), np.concatenate([own, nv[has]]))),
        shape=(4 * n_e, len(var_cells)))
    s0 = np.where(has, 0.0, bval.ravel() * inv)
    return Stencil(grid, var_cells, n_e, kind, nbr_var, nbr_cell, bval, ld, lw, coeff_e, area, weight, G, s0)


# ---------------------------------------------------------------------------
# energy and Newton descent


class CellTerm:
    """Optional separable term ``sum_i f(u_i)`` over energy cells (value, first, second derivative)."""

    def value(self, u):  # pragma: no cover - interface
        raise NotImplementedError

    def first(self, u):  # pragma: no cover
        raise NotImplementedError

    def second(self, u):  # pragma: no cover
        raise NotImplementedError


class DiscreteEnergy:
    """``sum a/p (q + eta^2)^(p/2) area`` plus an optional separable cell term."""

    def __init__(self, stencil: Stencil, p: float, eta: float, extra: Optional[CellTerm] = None):
        self.st = stencil
        self.p = float(p)
        self.eta2 = float(eta) ** 2
        self.extra = extra
        self.aA = stencil.coeff * stencil.area
        n_e = stencil.n_energy
        self._P = sp.csr_matrix((np.ones(4 * n_e), (np.repeat(np.arange(n_e), 4), np.arange(4 * n_e))),
                                shape=(n_e, 4 * n_e))

    def _q(self, u):
        s = self.st.slopes(u)
        return s, np.sum(self.st.weight * s * s, axis=1)

    def value(self, u) -> float:
        _, q = self._q(u)
        E = float(np.sum(self.aA / self.p * (q + self.eta2) ** (self.p / 2)))
        if self.extra is not None:
            E += float(np.sum(self.extra.value(u[: self.st.n_energy])))
        return E

    def link_force(self, u):
        """dE/ds per link, shape (n_cells, 4)."""
        s, q = self._q(u)
        F = (q + self.eta2) ** ((self.p - 2) / 2)
        return (self.aA * F)[:, None] * self.st.weight * s

    def gradient(self, u) -> np.ndarray:
        g = self.st.G.T @ self.link_force(u).ravel()
        if self.extra is not None:
            g[: self.st.n_energy] += self.extra.first(u[: self.st.n_energy])
        return g

    def hessian(self, u) -> sp.csr_matrix:
        st = self.st
        s, q = self._q(u)
        Q = q + self.eta2
        w1 = ((self.aA * Q ** ((self.p - 2) / 2))[:, None] * st.weight).ravel()
        H = st.G.T @ sp.diags(w1) @ st.G
        if self.p != 2:
            cs = (st.weight * s).ravel()
            B = self._P @ sp.diags(cs) @ st.G
            w2 = self.aA * (self.p - 2) * Q ** ((self.p - 4) / 2)
            H = H + B.T @ sp.diags(w2) @ B
        if self.extra is not None:
            d = np.zeros(st.n_var)
            d[: st.n_energy] = np.maximum(self.extra.second(u[: st.n_energy]), 0.0)
            H = H + sp.diags(d)
        return H.tocsr()

    def preconditioner(self) -> sp.csr_matrix:
        st = self.st
        w = (self.aA[:, None] * st.weight).ravel()
        return (st.G.T @ sp.diags(w) @ st.G).tocsr()


def _solve_linear(H, rhs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        try:
            # the Hessian is symmetric; symmetric mode keeps the minimum-degree ordering on the diagonal
            lu = spla.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))
            x = lu.solve(np.asarray(rhs, float))
        except RuntimeError:
            return None
    x = np.atleast_1d(x)
    return x if np.all(np.isfinite(x)) else None


def minimize_energy(obj: DiscreteEnergy, u0: np.ndarray, free: Optional[np.ndarray] = None,
                    lower: Optional[np.ndarray] = None, upper: Optional[np.ndarray] = None,
                    settings: SolverSettings = SolverSettings(), tol: Optional[float] = None,
                    callback=None):
    """Damped (projected) Newton with Armijo backtracking and a preconditioned-gradient fallback.

    Returns ``(u, SolveReport)``; raises :class:`SolverError` on failure.
    """
    u = np.array(u0, float)
    n = len(u)
    free = np.ones(n, bool) if free is None else np.asarray(free, bool)
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, float)
    u = np.clip(u, lo, hi)
    E = obj.value(u)
    if tol is None:
        tol = settings.tol * (abs(E) if E != 0 else 1.0)
    history = []
    roundoff = 64 * np.finfo(float).eps
    precond = None
    for it in range(settings.max_iter + 1):
        g = obj.gradient(u)
        blocked = ((u >= hi) & (g < 0)) | ((u <= lo) & (g > 0))
        work = free & ~blocked
        gnorm = float(np.max(np.abs(g[work]))) if np.any(work) else 0.0
        history.append((it, E, gnorm))
        if callback is not None:
            callback(it, E, gnorm)
        if gnorm < tol:
            return u, SolveReport(it, gnorm, E, tol, True, history)
        if it == settings.max_iter:
            break
        gw = g[work]
        accepted = False
        for attempt in range(3):
            if attempt == 0:
                d = _solve_linear(obj.hessian(u)[work][:, work], -gw)
            elif attempt == 1:
                # preconditioned gradient step with the frozen-coefficient Laplacian
                if precond is None:
                    precond = obj.preconditioner()
                P = precond[work][:, work]
                d = _solve_linear(P + sp.diags(np.full(P.shape[0], 1e-12 * max(1.0, abs(P.diagonal()).max()))), -gw)
            else:
                d = -gw
            if d is None or not float(d @ gw) < 0:
                continue
            t = 1.0
            for _ in range(60):
                trial = u.copy()
                trial[work] = np.clip(u[work] + t * d, lo[work], hi[work])
                Et = obj.value(trial)
                decrease = float(g[work] @ (trial[work] - u[work]))
                if Et <= E + settings.armijo * decrease + roundoff * abs(E) and Et <= E + roundoff * abs(E):
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            raise SolverError(f"line search failed at iteration {it} (grad norm {gnorm:.3e}, tol {tol:.3e})", history)
        u, E = trial, Et
    raise SolverError(f"no convergence after {settings.max_iter} iterations (grad norm {history[-1][2]:.3e}, "
                      f"tol {tol:.3e})", history)


# ---------------------------------------------------------------------------
# public operations


def _check_data(grid: GridDomain, phi):
    lo, hi = data_range(grid, phi)
    if not lo > 0:
        raise ValueError(f"boundary datum must be positive on the body boundary (min {lo:.6g})")
    return hi


def _field_from(stencil: Stencil, u, phi, config, p, eta, report, ghost=None) -> PotentialField:
    grid = stencil.grid
    values = stencil.scatter(u)
    X, Y = grid.centers
    values[grid.body_mask] = as_data(phi)(X[grid.body_mask], Y[grid.body_mask])
    return PotentialField(values, phi, config, p, eta, report, ghost)


def solve_potential(grid: GridDomain, medium: Medium, config: Configuration, phi,
                    settings: SolverSettings = SolverSettings(), initial=None) -> PotentialField:
    """Potential with ``u = phi`` on the body boundary and ``u = 0`` off the region."""
    phi = as_data(phi)
    sup = _check_data(grid, phi)
    eta = settings.eta_for(grid, sup)
    st = build_stencil(grid, config, phi, medium.coeff, theta_min=settings.theta_min)
    if st.n_var == 0:
        return _field_from(st, np.zeros(0), phi, config, medium.p, eta, SolveReport(0, 0.0, 0.0, 0.0, True))
    if initial is not None:
        u0 = np.clip(st.gather(initial), 0.0, sup)
    elif medium.p != 2:
        u0 = minimize_energy(DiscreteEnergy(st, 2.0, 0.0), np.zeros(st.n_var), settings=settings)[0]
    else:
        u0 = np.zeros(st.n_var)
    obj = DiscreteEnergy(st, medium.p, eta)
    u, report = minimize_energy(obj, u0, settings=settings)
    return _field_from(st, u, phi, config, medium.p, eta, report)


def _stencil_of(grid: GridDomain, medium: Medium, field: PotentialField) -> Stencil:
    return build_stencil(grid, field.config, field.phi, medium.coeff, ghost=field.ghost)


def cell_gradients(grid: GridDomain, medium: Medium, field: PotentialField):
    """Per-cell ``|grad_h u|`` and cell areas on the unknown cells (zero elsewhere)."""
    st = _stencil_of(grid, medium, field)
    s = st.slopes(st.gather(field.values))
    q = np.sum(st.weight * s * s, axis=1)
    grad = np.zeros(grid.nx * grid.ny)
    area = np.zeros(grid.nx * grid.ny)
    cells = st.energy_cells
    grad[cells] = np.sqrt(q)
    area[cells] = st.area
    return grad.reshape(grid.shape), area.reshape(grid.shape)


def cell_gradient_vectors(grid: GridDomain, medium: Medium, field: PotentialField):
    """Gradient vectors on unknown cells from the one-sided link slopes; returns (cells, gx, gy, area, coeff)."""
    st = _stencil_of(grid, medium, field)
    s = st.slopes(st.gather(field.values))
    lw = st.lw
    gx = (lw[:, 0] * s[:, 0] - lw[:, 1] * s[:, 1]) / (lw[:, 0] + lw[:, 1])
    gy = (lw[:, 2] * s[:, 2] - lw[:, 3] * s[:, 3]) / (lw[:, 2] + lw[:, 3])
    return st.energy_cells, gx, gy, st.area, st.coeff


def energy(grid: GridDomain, medium: Medium, field: PotentialField, region: Optional[np.ndarray] = None) -> float:
    """``sum <A(grad u), grad u> * area`` over the cells of ``region`` (all cells if None)."""
    st = _stencil_of(grid, medium, field)
    s = st.slopes(st.gather(field.values))
    q = np.sum(st.weight * s * s, axis=1)
    if medium.p < 2:
        dens = st.coeff * q * (q + field.eta ** 2) ** ((medium.p - 2) / 2)
    else:
        dens = st.coeff * q ** (medium.p / 2)
    per = dens * st.area
    if region is not None:
        per = per[np.asarray(region, bool).ravel()[st.energy_cells]]
    return float(np.sum(per))


def harmonic_replacement(grid: GridDomain, medium: Medium, field: PotentialField, ball,
                         settings: SolverSettings = SolverSettings()) -> PotentialField:
    """Replace the field inside ``ball = (center, radius)`` by the solution with the field as boundary data."""
    (cx, cy), radius = ball
    if _distance_to_body(grid, cx, cy) <= radius:
        raise ValueError("ball intersects the body boundary")
    inball = _ball_mask(grid, (cx, cy), radius)
    if not inball.any():
        raise ValueError("ball contains no cell center")
    cfg = field.config
    ls = None
    if cfg.level_set is not None:
        X, Y = grid.centers
        ls = np.maximum(cfg.level_set, radius - np.hypot(X - cx, Y - cy))
    union = Configuration(cfg.occupancy | inball, ls)
    st = build_stencil(grid, union, field.phi, medium.coeff, theta_min=settings.theta_min)
    u0 = st.gather(field.values)
    free = inball.ravel()[st.var_cells]
    obj = DiscreteEnergy(st, medium.p, field.eta)
    E0 = obj.value(u0)
    u, report = minimize_energy(obj, u0, free=free, settings=settings, tol=settings.tol * max(E0, 1e-300))
    out = _field_from(st, u, field.phi, union, medium.p, field.eta, report)
    # untouched cells keep their exact input values
    vals = np.where(inball, out.values, field.values)
    return replace(out, values=vals)


def _distance_to_body(grid: GridDomain, x: float, y: float) -> float:
    if hasattr(grid.body, "signed_distance"):
        return float(grid.body.signed_distance(np.array(x), np.array(y)))
    X, Y = grid.centers
    return float(np.min(np.hypot(X - x, Y - y)[grid.body_mask])) - 0.5 * grid.h


def _ball_mask(grid: GridDomain, center, radius) -> np.ndarray:
    X, Y = grid.centers
    return np.hypot(X - center[0], Y - center[1]) <= radius


@dataclass(frozen=True, eq=False)
class ResidualMeasure:
    values: np.ndarray  # per-cell density of div A(grad u)
    total: float  # sum over non-body cells of values * h^2
    boundary_flux: float  # conservative flux leaving the body
    tol_residual: float


def residual_measure(grid: GridDomain, medium: Medium, field: PotentialField) -> ResidualMeasure:
    """Discrete ``div A(grad u)`` as a per-cell density.

    Unknown cells get ``-dE/du / h^2``; the flux through a link that ends on
    the free boundary is booked on the empty cell beyond the crossing.
    """
    st = _stencil_of(grid, medium, field)
    obj = DiscreteEnergy(st, medium.p, field.eta)
    u = st.gather(field.values)
    h2 = grid.h ** 2
    mass = np.zeros(grid.nx * grid.ny)
    np.add.at(mass, st.var_cells, -obj.gradient(u))
    T = obj.link_force(u) / st.ld
    own = np.repeat(st.energy_cells[:, None], 4, axis=1)
    out = (st.kind == LINK_OUTER) | (st.kind == LINK_EDGE)
    target = np.where(st.nbr_cell >= 0, st.nbr_cell, own)
    np.add.at(mass, target[out], -T[out])
    flux = float(np.sum(T[st.kind == LINK_BODY]))
    values = (mass / h2).reshape(grid.shape)
    values[grid.body_mask] = 0.0
    rep = field.solve_report
    tol_res = 10 * rep.tol / h2 if rep is not None else 0.0
    return ResidualMeasure(values, float(np.sum(mass[~grid.body_mask.ravel()])), flux, tol_res)


@dataclass(frozen=True, eq=False)
class FluxProfile:
    samples: object  # BoundarySamples of the body boundary
    values: np.ndarray
    integral: float
    formal: bool = False

    def rows(self):
        s = self.samples.arclength
        return [(float(s[k]), float(self.samples.points[k, 0]), float(self.samples.points[k, 1]), float(self.values[k]))
                for k in range(len(self.values))]


def flux_profile(grid: GridDomain, medium: Medium, field: PotentialField) -> FluxProfile:
    """Conormal derivative on the body boundary from a one-sided three-point difference (spacing 2h)."""
    h = grid.h
    thin = ~field.config.occupancy & collar(grid, min(3 * h, 0.999 * grid.clearance))
    if np.any(thin):
        raise ValueError("collar thinner than 3h: empty cells within 3h of the body")
    bs = grid.boundary
    pts, inward = bs.points, bs.normals
    out = -inward
    phi = as_data(field.phi)
    f0 = phi(pts[:, 0], pts[:, 1])
    samples = []
    for dist in (2 * h, 4 * h):
        q = pts + dist * out
        row, col = grid.to_index(q[:, 0], q[:, 1])
        samples.append(ndimage.map_coordinates(field.values, [row, col], order=1, mode="nearest"))
    dn = (-3.0 * f0 + 4.0 * samples[0] - samples[1]) / (4.0 * h)
    tang = np.stack([-inward[:, 1], inward[:, 0]], axis=1)
    ds = (phi(pts[:, 0] + h * tang[:, 0], pts[:, 1] + h * tang[:, 1])
          - phi(pts[:, 0] - h * tang[:, 0], pts[:, 1] - h * tang[:, 1])) / (2 * h)
    grad = dn[:, None] * out + ds[:, None] * tang
    near = pts + 2 * h * out
    r, c = grid.cell_of(near[:, 0], near[:, 1])
    a = medium.coeff[r, c]
    mod2 = np.sum(grad * grad, axis=1)
    if medium.p < 2:
        mod2 = mod2 + field.eta ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(mod2 > 0, a * mod2 ** ((medium.p - 2) / 2), 0.0)
    vals = scale * np.sum(grad * inward, axis=1)
    formal = not is_collar_smooth(grid, medium, 5 * h)
    return FluxProfile(bs, vals, float(np.sum(vals * bs.weights)), formal)
