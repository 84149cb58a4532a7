"""Minimization of the penalized flux cost over insulating configurations.

The main search is an accept/reject boundary-cell exchange: a cheap
shape-derivative surrogate ranks candidate flips, batches are proposed
greedily and every proposal is re-solved exactly before it is accepted.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, ndimage

from .functionals import Evaluation, Nonlinearity, PenaltyParams, penalized_objective
from .grid import (Configuration, GridDomain, collar, configuration_from_occupancy, disk_configuration,
                   free_boundary_samples, level_set_configuration, perimeter_estimate, validate_configuration,
                   volume_excess)
from .medium import Medium
from .solver import PotentialField, SolverSettings, as_data, cell_gradient_vectors, cell_gradients, data_range

FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool)


@dataclass(frozen=True)
class OptimizerConfig:
    move_kind: str = "exchange"  # "exchange" or "levelset"
    max_outer_iter: int = 400
    step: int = 64  # initial batch size (exchange) or front displacement in cells (levelset)
    seed: int = 0
    restart_count: int = 0
    collar_width: Optional[float] = None  # default max(4h, 0.05 r0)
    patience: int = 8  # consecutive rejected single flips before stopping
    exhaustive_check: bool = False  # verify single-flip stability by exact re-solves
    max_batch: int = 4096

    def __post_init__(self):
        if self.move_kind not in ("exchange", "levelset"):
            raise ValueError(f"move_kind must be exchange|levelset, got {self.move_kind!r}")
        if self.max_outer_iter < 1:
            raise ValueError("max_outer_iter must be at least 1")
        if not self.step > 0:
            raise ValueError("step must be positive")

    def collar_for(self, grid: GridDomain) -> float:
        if self.collar_width is not None:
            return float(self.collar_width)
        return max(4 * grid.h, 0.05 * grid.body_radius)


@dataclass(eq=False)
class OptimalDesign:
    config: Configuration
    potential: PotentialField
    J: float
    penalty: float
    J_lambda: float
    excess: float
    perimeter: float
    saturated: bool
    trace: list  # (iter, J, excess, J_lambda) per accepted state
    grid: GridDomain
    medium: Medium
    nonlinearity: Nonlinearity
    params: PenaltyParams
    phi: Callable
    evaluations: Optional[list] = None

    def trace_rows(self):
        return [dict(iter=i, J=j, excess=e, J_lambda=jl) for i, j, e, jl in self.trace]


def _saturation(grid, config, params, excess):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per = perimeter_estimate(grid, config)
    return per, abs(excess - params.iota) < 2 * grid.h * per


def _design(grid, medium, nonlinearity, params, phi, ev: Evaluation, config, trace, evaluations=None):
    per, sat = _saturation(grid, config, params, ev.excess)
    return OptimalDesign(config, ev.field, ev.J, ev.penalty, ev.J_lambda, ev.excess, per, sat, trace,
                         grid, medium, nonlinearity, params, as_data(phi), evaluations)


def evaluate_design(grid: GridDomain, medium: Medium, nonlinearity: Nonlinearity, params: PenaltyParams, phi,
                    config: Configuration, settings: SolverSettings = SolverSettings()) -> OptimalDesign:
    """Wrap a fixed configuration (for instance one read back from disk) as a design."""
    ev = penalized_objective(nonlinearity, params, grid, medium, config, phi, settings)
    return _design(grid, medium, nonlinearity, params, phi, ev, config, [(0, ev.J, ev.excess, ev.J_lambda)])


class _Evaluator:
    def __init__(self, grid, medium, nonlinearity, params, phi, settings):
        self.args = (grid, medium, nonlinearity, params, phi)
        self.settings = settings
        self.count = 0

    def __call__(self, config: Configuration, warm=None) -> Evaluation:
        grid, medium, nonlinearity, params, phi = self.args
        self.count += 1
        return penalized_objective(nonlinearity, params, grid, medium, config, phi, self.settings,
                                   initial=None if medium.p == 2 else warm)


SURROGATE_SIGMA = 1.0  # cells; smoothing of the boundary energy density


def _surrogate(grid: GridDomain, medium: Medium, field: PotentialField):
    """Per-cell shape-derivative estimates ``(p-1) a |grad u|^p h^2`` for removing and adding cells.

    The density is averaged over nearby occupied cells (normalized Gaussian
    weights), so that an add and a remove at the same place see the same value
    and staircase corners do not produce spurious swaps.
    """
    grad, area = cell_gradients(grid, medium, field)
    live = field.config.occupancy & ~grid.body_mask & (area > 0)
    dens = np.where(live, (medium.p - 1) * medium.coeff * grad ** medium.p, 0.0)
    num = ndimage.gaussian_filter(dens, SURROGATE_SIGMA, mode="constant")
    den = ndimage.gaussian_filter(live.astype(float), SURROGATE_SIGMA, mode="constant")
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(den > 1e-3, num / den, np.nan) * grid.h ** 2
    occ = field.config.occupancy
    inner = occ & ndimage.binary_dilation(~occ, FOUR) & ~grid.body_mask
    outer = ~occ & ndimage.binary_dilation(occ, FOUR)
    return np.where(inner, g, np.nan), np.where(outer, g, np.nan)


def _layer_move(grid, evaluate, ev, occ, protected, forbidden):
    """Try growing or shrinking the whole free boundary by one cell layer."""
    best = None
    grown = ndimage.binary_dilation(occ, FOUR) & ~forbidden
    shrunk = ndimage.binary_erosion(occ, FOUR) | protected
    for new in (grown, shrunk):
        new = configuration_from_occupancy(grid, new).occupancy
        if np.array_equal(new, occ):
            continue
        cand = evaluate(Configuration(new), warm=ev.field.values)
        if cand.J_lambda < ev.J_lambda - 1e-13 * abs(ev.J_lambda) and (best is None or cand.J_lambda < best[1].J_lambda):
            best = (new, cand)
    return best


def _ranked(gains: np.ndarray, mask: np.ndarray, descending: bool):
    idx = np.flatnonzero(mask.ravel() & np.isfinite(gains.ravel()))
    g = gains.ravel()[idx]
    order = np.lexsort((idx, -g if descending else g))  # ties broken by cell index
    return idx[order], g[order]


def _penalty_delta(params: PenaltyParams, excess: float, dv: float) -> float:
    lam, iota = params.lambda_pen, params.iota
    return lam * (max(excess + dv - iota, 0.0) - max(excess - iota, 0.0))


def _greedy_batch(add_idx, add_g, rem_idx, rem_g, excess, params, kappa, h2, size, banned=frozenset()):
    """Pick up to ``size`` flips with negative predicted change, best first."""
    ia = ir = 0
    adds, rems = [], []
    predicted = 0.0
    na, nr = len(add_idx), len(rem_idx)

    def skip(i, idx):
        while i < len(idx) and idx[i] in banned:
            i += 1
        return i

    while len(adds) + len(rems) < size:
        ia, ir = skip(ia, add_idx), skip(ir, rem_idx)
        best, choice = 0.0, None
        if ia < na:
            d = -kappa * add_g[ia] + _penalty_delta(params, excess, h2)
            if d < best:
                best, choice = d, "add"
        if ir < nr:
            d = kappa * rem_g[ir] + _penalty_delta(params, excess, -h2)
            if d < best:
                best, choice = d, "rem"
        if ia < na and ir < nr and len(adds) + len(rems) + 2 <= max(size, 2):
            d = kappa * (rem_g[ir] - add_g[ia])
            if d < best:
                best, choice = d, "swap"
        if choice is None:
            break
        if choice in ("add", "swap"):
            adds.append(add_idx[ia])
            ia += 1
            excess += h2
        if choice in ("rem", "swap"):
            rems.append(rem_idx[ir])
            ir += 1
            excess -= h2
        predicted += best
    return adds, rems, predicted


def _protected(grid: GridDomain, opt: OptimizerConfig) -> np.ndarray:
    width = min(opt.collar_for(grid), 0.999 * grid.clearance)
    return grid.body_mask | collar(grid, width)


def _border(grid: GridDomain) -> np.ndarray:
    b = np.zeros(grid.shape, bool)
    b[0, :] = b[-1, :] = b[:, 0] = b[:, -1] = True
    return b


def _initial_kappa(nonlinearity: Nonlinearity, ev: Evaluation, grid: GridDomain, phi) -> float:
    w = nonlinearity.weights_for(len(ev.flux.values))
    slope = float(np.mean(w * nonlinearity.profile.derivative(np.maximum(ev.flux.values, 0.0))))
    lo, hi = data_range(grid, phi)
    return slope / (0.5 * (lo + hi))


def _exchange(grid, medium, nonlinearity, params, phi, opt, evaluate, config, protected, forbidden):
    h2 = grid.h ** 2
    occ = config.occupancy.copy()
    ev = evaluate(Configuration(occ))
    kappa0 = kappa = _initial_kappa(nonlinearity, ev, grid, phi)
    trace = [(0, ev.J, ev.excess, ev.J_lambda)]
    batch = int(opt.step)
    banned = set()
    fails = 0
    it = 0
    while it < opt.max_outer_iter:
        it += 1
        rem_g, add_g = _surrogate(grid, medium, ev.field)
        can_rem = occ & ~protected
        can_add = ~occ & ~forbidden
        add_idx, add_v = _ranked(add_g, can_add, descending=True)
        rem_idx, rem_v = _ranked(rem_g, can_rem, descending=False)
        adds, rems, predicted = _greedy_batch(add_idx, add_v, rem_idx, rem_v, ev.excess, params, kappa, h2,
                                              batch, banned if batch == 1 else frozenset())
        if not adds and not rems:
            if batch > 1:
                batch = 1
                continue
            moved = _stuck(grid, params, evaluate, ev, occ, can_add, can_rem, opt, protected, forbidden)
            if moved is None:
                break
            occ, ev = moved
            trace.append((it, ev.J, ev.excess, ev.J_lambda))
            banned.clear()
            batch = int(opt.step)
            continue
        new = occ.copy()
        new.ravel()[adds] = True
        new.ravel()[rems] = False
        new = configuration_from_occupancy(grid, new).occupancy
        cand = evaluate(Configuration(new), warm=ev.field.values)
        if cand.J_lambda < ev.J_lambda - 1e-13 * abs(ev.J_lambda):
            # recalibrate the surrogate scale on small one-sided batches only
            sur = float(np.sum(rem_g.ravel()[rems])) - float(np.sum(add_g.ravel()[adds]))
            if (not adds or not rems) and len(adds) + len(rems) <= 64 and abs(sur) > 1e-14 \
                    and (cand.J - ev.J) / sur > 0:
                ratio = float(np.clip((cand.J - ev.J) / sur, kappa0 / 3, 3 * kappa0))
                kappa = math.sqrt(kappa * ratio)
            occ, ev = new, cand
            trace.append((it, ev.J, ev.excess, ev.J_lambda))
            batch = min(2 * batch, opt.max_batch)
            banned.clear()
            fails = 0
        elif batch > 1:
            batch = max(1, min(batch, len(adds) + len(rems)) // 2)
        else:
            banned.update(adds)
            banned.update(rems)
            fails += 1
            if fails >= opt.patience:
                moved = _stuck(grid, params, evaluate, ev, occ, can_add, can_rem, opt, protected, forbidden)
                if moved is None:
                    break
                occ, ev = moved
                trace.append((it, ev.J, ev.excess, ev.J_lambda))
                banned.clear()
                batch = int(opt.step)
                fails = 0
    return Configuration(occ), ev, trace


def _stuck(grid, params, evaluate, ev, occ, can_add, can_rem, opt, protected, forbidden):
    """Escape moves once batches stall: a layer move, then (optionally) the exhaustive single-flip scan."""
    moved = _layer_move(grid, evaluate, ev, occ, protected, forbidden)
    if moved is None and opt.exhaustive_check:
        moved = _single_flip_scan(grid, params, evaluate, ev, occ, can_add, can_rem, opt)
    return moved


def _single_flip_scan(grid, params, evaluate, ev, occ, can_add, can_rem, opt):
    """Exact re-solve of every admissible single flip; returns the best improving one or None."""
    boundary_in = occ & ndimage.binary_dilation(~occ, FOUR)
    boundary_out = ~occ & ndimage.binary_dilation(occ, FOUR)
    cells = np.concatenate([np.flatnonzero((can_add & boundary_out).ravel()),
                            np.flatnonzero((can_rem & boundary_in).ravel())])
    best = None
    for c in np.sort(cells):
        new = occ.copy()
        new.ravel()[c] = ~new.ravel()[c]
        new = configuration_from_occupancy(grid, new).occupancy
        cand = evaluate(Configuration(new), warm=ev.field.values)
        if cand.J_lambda < ev.J_lambda - 1e-13 * abs(ev.J_lambda):
            if best is None or cand.J_lambda < best[1].J_lambda:
                best = (new, cand)
    return best


def _signed_distance(grid: GridDomain, occ: np.ndarray) -> np.ndarray:
    inside = ndimage.distance_transform_edt(occ)
    outside = ndimage.distance_transform_edt(~occ)
    return (np.where(occ, inside - 0.5, 0.5 - outside)) * grid.h


def _levelset(grid, medium, nonlinearity, params, phi, opt, evaluate, config, protected, forbidden):
    h = grid.h
    ls = config.level_set if config.level_set is not None else _signed_distance(grid, config.occupancy)

    def clamp(l):
        l = np.where(protected, np.maximum(l, 0.5 * h), l)
        return np.where(forbidden, np.minimum(l, -0.5 * h), l)

    ls = clamp(ls)
    cfg = level_set_configuration(grid, ls)
    ev = evaluate(cfg)
    kappa = _initial_kappa(nonlinearity, ev, grid, phi)
    trace = [(0, ev.J, ev.excess, ev.J_lambda)]
    step = float(opt.step) if opt.step <= 4 else 2.0
    min_step = 0.02
    for it in range(1, opt.max_outer_iter + 1):
        if step < min_step:
            break
        rem_g, _ = _surrogate(grid, medium, ev.field)
        gain = np.where(np.isfinite(rem_g), rem_g, 0.0) / h ** 2
        lam_eff = params.lambda_pen if ev.excess >= params.iota else 0.0
        speed_cells = np.isfinite(rem_g)
        if not speed_cells.any():
            break
        V = kappa * gain - lam_eff
        _, (ir, ic) = ndimage.distance_transform_edt(~speed_cells, return_indices=True)
        V = V[ir, ic]
        vmax = np.max(np.abs(V))
        if vmax == 0:
            break
        gy, gx = np.gradient(ls, h)
        trial = clamp(ls + (step * h / vmax) * V * np.hypot(gx, gy))
        cfg_t = level_set_configuration(grid, trial)
        if np.array_equal(cfg_t.occupancy, cfg.occupancy) and step < 1:
            step *= 0.5
            continue
        cand = evaluate(cfg_t, warm=ev.field.values)
        if cand.J_lambda < ev.J_lambda - 1e-13 * abs(ev.J_lambda):
            ls, cfg, ev = trial, cfg_t, cand
            trace.append((it, ev.J, ev.excess, ev.J_lambda))
            step = min(step * 1.5, 4.0)
        else:
            step *= 0.5
    return cfg, ev, trace


def _perturbed_start(grid, config, protected, forbidden, seed):
    rng = np.random.default_rng(seed)
    occ = config.occupancy.copy()
    edge = occ ^ ndimage.binary_erosion(occ, FOUR)
    outside = ~occ & ndimage.binary_dilation(occ, FOUR)
    flip = (edge & ~protected & (rng.random(grid.shape) < 0.3)) | (outside & ~forbidden & (rng.random(grid.shape) < 0.3))
    occ ^= flip
    return configuration_from_occupancy(grid, occ)


def minimize_penalized(grid: GridDomain, medium: Medium, nonlinearity: Nonlinearity, params: PenaltyParams, phi,
                       opt_config: OptimizerConfig = OptimizerConfig(), init: Optional[Configuration] = None,
                       settings: SolverSettings = SolverSettings()) -> OptimalDesign:
    """Local minimizer of ``J + lambda (excess - iota)^+`` among configurations containing the collar.

    ``init`` defaults to the disk whose excess equals the budget.
    """
    phi = as_data(phi)
    protected = _protected(grid, opt_config)
    forbidden = _border(grid)
    if init is None:
        r0 = grid.body_radius
        init = disk_configuration(grid, math.sqrt(r0 ** 2 + params.iota / math.pi))
    evaluate = _Evaluator(grid, medium, nonlinearity, params, phi, settings)
    run = _exchange if opt_config.move_kind == "exchange" else _levelset

    def start(cfg):
        occ = (cfg.occupancy | protected) & ~forbidden
        ls = cfg.level_set if opt_config.move_kind == "levelset" else None
        return configuration_from_occupancy(grid, occ, ls)

    best = None
    starts = [start(init)] + [_perturbed_start(grid, start(init), protected, forbidden, opt_config.seed + k)
                              for k in range(1, opt_config.restart_count + 1)]
    for cfg in starts:
        out = run(grid, medium, nonlinearity, params, phi, opt_config, evaluate, cfg, protected, forbidden)
        if best is None or out[1].J_lambda < best[1].J_lambda:
            best = out
    cfg, ev, trace = best
    return _design(grid, medium, nonlinearity, params, phi, ev, cfg, trace)


# ---------------------------------------------------------------------------
# penalty sweep


@dataclass(frozen=True, eq=False)
class Problem:
    grid: GridDomain
    medium: Medium
    nonlinearity: Nonlinearity
    iota: float
    phi: Callable
    opt_config: OptimizerConfig = OptimizerConfig()
    settings: SolverSettings = SolverSettings()
    init: Optional[Configuration] = None


@dataclass
class SweepResult:
    rows: list  # dicts with lambda, excess, J, J_lambda, saturated, perimeter
    lambda0: Optional[float]
    designs: list

    def table(self):
        return [(r["lambda"], r["excess"], r["J"], r["J_lambda"], r["saturated"]) for r in self.rows]


def lambda_sweep(problem: Problem, lambdas: Sequence[float]) -> SweepResult:
    """Optimize for each penalty slope (warm-started from the previous design) and locate the threshold.

    The empirical threshold is the smallest slope whose design has
    ``excess <= iota + 2 h perimeter``; None if no slope in the list reaches it.
    """
    lambdas = [float(l) for l in lambdas]
    if len(lambdas) < 3 or any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda list must be strictly increasing with at least three values")
    grid = problem.grid
    rows, designs = [], []
    init = problem.init
    lam0 = None
    for lam in lambdas:
        params = PenaltyParams(lam, problem.iota)
        d = minimize_penalized(grid, problem.medium, problem.nonlinearity, params, problem.phi,
                               problem.opt_config, init, problem.settings)
        designs.append(d)
        init = d.config
        rows.append({"lambda": lam, "excess": d.excess, "J": d.J, "J_lambda": d.J_lambda,
                     "saturated": d.saturated, "perimeter": d.perimeter})
        if lam0 is None and d.excess <= problem.iota + 2 * grid.h * d.perimeter:
            lam0 = lam
    return SweepResult(rows, lam0, designs)


# ---------------------------------------------------------------------------
# exhaustive star-shaped oracle

MAX_SECTORS = 10
MAX_LEVELS = 5


def _sector_masks(grid: GridDomain, sectors: int, levels: Sequence[float]):
    """masks[k, j]: cells whose angle lies in (closed) sector k and radius <= levels[j]."""
    cx, cy = grid.body_center
    X, Y = grid.centers
    ang = np.mod(np.arctan2(Y - cy, X - cx), 2 * math.pi) / (2 * math.pi) * sectors
    rad = np.hypot(X - cx, Y - cy)
    masks = np.zeros((sectors, len(levels)) + grid.shape, bool)
    tol = 1e-9
    for k in range(sectors):
        lo, hi = k, k + 1
        in_k = (ang >= lo - tol) & (ang <= hi + tol)
        if k == 0:
            in_k |= ang >= sectors - tol
        if k == sectors - 1:
            in_k |= ang <= tol
        for j, r in enumerate(levels):
            masks[k, j] = in_k & (rad <= r + 1e-12)
    return masks


def _symmetry_maps(grid: GridDomain, medium: Medium, nonlinearity: Nonlinearity, phi) -> list:
    """Grid symmetries (subgroup of the square's) that leave the whole problem invariant."""
    maps = [lambda a: a]
    if grid.nx != grid.ny:
        return maps
    w = np.asarray(nonlinearity.weight, float)
    if w.ndim != 0:
        return maps
    pts = grid.boundary.points
    vals = as_data(phi)(pts[:, 0], pts[:, 1])
    if np.ptp(vals) > 1e-12 * abs(vals).max():
        return maps
    cand = [lambda a: np.rot90(a, 1), lambda a: np.rot90(a, 2), lambda a: np.rot90(a, 3),
            lambda a: a[:, ::-1], lambda a: a[::-1, :], lambda a: a.T, lambda a: np.rot90(a, 2).T]
    xlo, xhi, ylo, yhi = grid.box
    cx, cy = grid.body_center
    centered = abs(cx - 0.5 * (xlo + xhi)) < 1e-12 and abs(cy - 0.5 * (ylo + yhi)) < 1e-12
    if not centered or len(grid.boundary) % 4:
        return maps
    for f in cand:
        if np.array_equal(f(grid.body_mask), grid.body_mask) and np.array_equal(f(medium.coeff), medium.coeff):
            maps.append(f)
    return maps


def _evaluate_keys(args):
    grid, medium, nonlinearity, params, phi, settings, occs = args
    out = []
    for occ in occs:
        ev = penalized_objective(nonlinearity, params, grid, medium, Configuration(occ), phi, settings)
        out.append((ev.J, ev.penalty, ev.J_lambda))
    return out


def brute_force_minimizer(grid: GridDomain, medium: Medium, nonlinearity: Nonlinearity, params: PenaltyParams, phi,
                          sectors: int, radius_levels: Sequence[float], settings: SolverSettings = SolverSettings(),
                          workers: int = 1) -> OptimalDesign:
    """Exhaustive search over star-shaped regions with one radius level per angular sector.

    Configurations that coincide (directly or under a symmetry of the
    problem) are solved once.  ``evaluations`` on the result lists
    ``(radius_indices, J_lambda)`` for every candidate, in lexicographic order.
    """
    levels = [float(r) for r in radius_levels]
    if not 1 <= sectors <= MAX_SECTORS or not 1 <= len(levels) <= MAX_LEVELS:
        raise ValueError(f"budget exceeded: at most {MAX_SECTORS} sectors and {MAX_LEVELS} radius levels "
                         f"(got {sectors} x {len(levels)})")
    phi = as_data(phi)
    masks = _sector_masks(grid, sectors, levels)
    maps = _symmetry_maps(grid, medium, nonlinearity, phi)
    combos = list(itertools.product(range(len(levels)), repeat=sectors))
    canon_of = []
    unique = {}
    order = []
    for combo in combos:
        # every sector touches the body, so the union is already a valid region
        occ = grid.body_mask.copy()
        for k, j in enumerate(combo):
            occ |= masks[k, j]
        key = min(np.packbits(f(occ)).tobytes() for f in maps)
        if key not in unique:
            unique[key] = len(order)
            order.append(occ)
        canon_of.append(unique[key])
    args = (grid, medium, nonlinearity, params, phi, settings)
    for occ in order:
        validate_configuration(grid, Configuration(occ))
    if workers > 1:
        chunks = [order[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_evaluate_keys, [args + (c,) for c in chunks]))
        results = [None] * len(order)
        for i, part in enumerate(parts):
            for j, r in enumerate(part):
                results[i + j * workers] = r
    else:
        results = _evaluate_keys(args + (order,))
    values = [results[c][2] for c in canon_of]
    best = int(np.argmin(values))  # first minimum in lexicographic order
    occ = order[canon_of[best]]
    ev = penalized_objective(nonlinearity, params, grid, medium, Configuration(occ), phi, settings)
    evaluations = [(combo, v) for combo, v in zip(combos, values)]
    d = _design(grid, medium, nonlinearity, params, phi, ev, Configuration(occ), [(0, ev.J, ev.excess, ev.J_lambda)],
                evaluations)
    d.unique_solves = len(order)
    d.best_levels = tuple(levels[j] for j in combos[best])
    return d


# ---------------------------------------------------------------------------
# inward perturbations


def perturbation_bump(t):
    t = np.asarray(t, float)
    return np.where((t >= 0) & (t <= 1), 30.0 * t * t * (1.0 - t) ** 2, 0.0)


def perturbation_bump_slope(t):
    t = np.asarray(t, float)
    return np.where((t >= 0) & (t <= 1), 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t), 0.0)


BUMP_MAX_SLOPE = float(perturbation_bump_slope((3.0 - math.sqrt(3.0)) / 6.0))


@dataclass(frozen=True)
class PerturbationSpec:
    """Displacement ``X -> X - alpha r bump(|X - Z0| / r) normal`` supported in the ball of radius r."""

    center: tuple
    normal: tuple  # outward unit normal at the center
    r: float
    alpha: float

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        object.__setattr__(self, "normal", tuple(n / np.linalg.norm(n)))
        object.__setattr__(self, "center", tuple(map(float, self.center)))
        if not self.r > 0:
            raise ValueError("radius must be positive")
        if not 0 <= self.alpha <= 0.2:
            raise ValueError("alpha must lie in [0, 0.2]")
        if self.alpha * BUMP_MAX_SLOPE >= 1:
            raise ValueError(f"perturbation map not injective: alpha * max bump slope = "
                             f"{self.alpha * BUMP_MAX_SLOPE:.4f} >= 1")

    def displacement(self, x, y):
        cx, cy = self.center
        b = perturbation_bump(np.hypot(x - cx, y - cy) / self.r)
        return -self.alpha * self.r * b * self.normal[0], -self.alpha * self.r * b * self.normal[1]

    def inverse(self, x, y, iterations: int = 60):
        """Preimage under the map by fixed-point iteration (a contraction since alpha * max slope < 1)."""
        px, py = np.array(x, float), np.array(y, float)
        for _ in range(iterations):
            dx, dy = self.displacement(px, py)
            px, py = x - dx, y - dy
        return px, py

    def jacobian(self, x, y):
        """Determinant and matrix entries of the map's derivative at points."""
        cx, cy = self.center
        rx, ry = x - cx, y - cy
        rho = np.hypot(rx, ry)
        with np.errstate(invalid="ignore", divide="ignore"):
            ex = np.where(rho > 0, rx / np.maximum(rho, 1e-300), 0.0)
            ey = np.where(rho > 0, ry / np.maximum(rho, 1e-300), 0.0)
        sl = self.alpha * perturbation_bump_slope(rho / self.r)
        nx, ny = self.normal
        # D = I - sl * normal (x) e
        a11, a12 = 1 - sl * nx * ex, -sl * nx * ey
        a21, a22 = -sl * ny * ex, 1 - sl * ny * ey
        return a11 * a22 - a12 * a21, (a11, a12, a21, a22)


def _check_away_from_body(grid: GridDomain, spec: PerturbationSpec):
    from .solver import _distance_to_body

    if _distance_to_body(grid, *spec.center) <= spec.r:
        raise ValueError("perturbation ball intersects the body")


def perturb_inward(grid: GridDomain, config: Configuration, spec: PerturbationSpec) -> Configuration:
    """Image of the region under the perturbation; cells outside the ball are copied bit for bit."""
    _check_away_from_body(grid, spec)
    if spec.alpha == 0:
        return config
    X, Y = grid.centers
    inball = np.hypot(X - spec.center[0], Y - spec.center[1]) < spec.r
    px, py = spec.inverse(X[inball], Y[inball])
    row, col = grid.to_index(px, py)
    if config.level_set is not None:
        ls = config.level_set.copy()
        ls[inball] = ndimage.map_coordinates(config.level_set, [row, col], order=1, mode="nearest")
        occ = config.occupancy.copy()
        occ[inball] = ls[inball] >= 0
    else:
        ls = None
        occ = config.occupancy.copy()
        occ[inball] = ndimage.map_coordinates(config.occupancy.astype(float), [row, col], order=1,
                                              mode="nearest") >= 0.5
    occ |= grid.body_mask
    return Configuration(occ, ls)


def volume_differential(grid: GridDomain, config: Configuration, spec: PerturbationSpec) -> float:
    """``(excess before - excess after) / (alpha r^2)``; for alpha = 0 the first-order limit from the isoline."""
    if spec.alpha == 0:
        _check_away_from_body(grid, spec)
        fb = free_boundary_samples(grid, config)
        d = np.hypot(fb.points[:, 0] - spec.center[0], fb.points[:, 1] - spec.center[1])
        cos = fb.normals @ np.asarray(spec.normal)
        return float(np.sum(perturbation_bump(d / spec.r) * cos * fb.weights) / spec.r)
    new = perturb_inward(grid, config, spec)
    return (_covered_area(grid, config) - _covered_area(grid, new)) / (spec.alpha * spec.r ** 2)


def _covered_area(grid: GridDomain, config: Configuration) -> float:
    """Excess volume with sub-cell resolution when a level set is available.

    Each cell contributes the fraction of it where the linearized level set
    is nonnegative; without a level set this is the raster count.
    """
    if config.level_set is None:
        return volume_excess(grid, config)
    ls = config.level_set
    gy, gx = np.gradient(ls, grid.h)
    spread = 0.5 * grid.h * (np.abs(gx) + np.abs(gy))
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(spread > 0, np.clip(0.5 + 0.5 * ls / spread, 0.0, 1.0), (ls >= 0).astype(float))
    frac[grid.body_mask] = 0.0
    return float(np.sum(frac) * grid.h ** 2)


def energy_differential(grid: GridDomain, medium: Medium, config: Configuration, field: PotentialField,
                        spec: PerturbationSpec) -> float:
    """First variation of the energy under the perturbation, by pulling the transported field back.

    The transported field ``v(Phi(X)) = u(X)`` has energy
    ``sum a |D Phi^{-T} grad u|^p det(D Phi) * area``; the change is divided by ``alpha r^2``.
    """
    _check_away_from_body(grid, spec)
    if spec.alpha == 0:
        return 0.0
    cells, gx, gy, area, a = cell_gradient_vectors(grid, medium, field)
    X, Y = grid.centers
    x, y = X.ravel()[cells], Y.ravel()[cells]
    inball = np.hypot(x - spec.center[0], y - spec.center[1]) < spec.r
    det, (a11, a12, a21, a22) = spec.jacobian(x[inball], y[inball])
    if np.any(det <= 0):
        raise ValueError("perturbation Jacobian is singular")
    # D^{-T} grad u
    gxb, gyb = gx[inball], gy[inball]
    tx = (a22 * gxb - a21 * gyb) / det
    ty = (-a12 * gxb + a11 * gyb) / det
    p = medium.p
    before = a[inball] * np.hypot(gxb, gyb) ** p
    after = a[inball] * np.hypot(tx, ty) ** p * det
    return float(np.sum((after - before) * area[inball]) / (spec.alpha * spec.r ** 2))


def m2_half_disk_quadrature() -> float:
    """Area integral of ``bump'(|Y|) <Y/|Y|, normal>`` over the inner half unit disk (polar dblquad)."""
    val, _ = integrate.dblquad(lambda rho, th: perturbation_bump_slope(rho) * math.cos(th) * rho,
                               math.pi / 2, 3 * math.pi / 2, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12)
    return float(val)


def m2_segment_quadrature() -> float:
    """Line integral of ``bump(|t|)`` over the diameter [-1, 1] (Gauss-Kronrod)."""
    val, _ = integrate.quad(lambda t: float(perturbation_bump(abs(t))), -1.0, 1.0, points=[0.0], epsabs=1e-13)
    return float(val)
