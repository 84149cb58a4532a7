"""Measured regularity and geometry of computed designs: Lipschitz bound, growth, densities, boundary trace."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .grid import free_boundary_samples
from .solver import cell_gradient_vectors, flux_profile, residual_measure

BAND_CELLS = 3.0
REDUCED_FIT_THRESHOLD = 0.2  # residual / r below this fraction of the slope marks a regular point
BALANCE_TOL = 0.05


@dataclass
class RegularityReport:
    lip_sup: float = float("nan")
    lip_ratio: float = float("nan")
    nondeg_rows: list = field(default_factory=list)  # (x, y, dist, u, u/dist)
    nondeg_min: float = float("nan")
    nondeg_scaled: float = float("nan")
    strong_rows: list = field(default_factory=list)  # (x, y, r, sup u / r)
    strong_min: float = float("nan")

    def rows(self):
        out = [("lip_sup", "", "", self.lip_sup), ("lip_ratio", "", "", self.lip_ratio),
               ("nondeg_min", "", "", self.nondeg_min), ("nondeg_scaled", "", "", self.nondeg_scaled),
               ("strong_min", "", "", self.strong_min)]
        out += [("nondeg", f"{x:.6f}", f"{d:.6f}", q) for x, y, d, u, q in self.nondeg_rows]
        out += [("strong", f"{x:.6f}", f"{r:.6f}", q) for x, y, r, q in self.strong_rows]
        return out


@dataclass
class GeometryReport:
    density_rows: list  # (x, y, r, fraction, complement)
    hausdorff_rows: list  # (x, y, r, length / r)
    varsigma_est: float
    warnings: list = field(default_factory=list)


@dataclass
class TraceQ:
    points: np.ndarray
    weights: np.ndarray
    Q: np.ndarray
    theta: np.ndarray

    @property
    def summary(self) -> dict:
        ok = np.isfinite(self.Q)
        q = self.Q[ok]
        # the mean is per unit boundary length
        return {"min": float(q.min()), "max": float(q.max()), "mean": float(np.average(q, weights=self.weights[ok])),
                "inf_estimate": float(np.percentile(q, 5)), "ratio": float(q.max() / q.min())}

    @property
    def integral(self) -> float:
        return float(np.sum(np.where(np.isfinite(self.Q), self.Q, 0.0) * self.weights))


@dataclass
class BlowupFit:
    radii: np.ndarray
    theta: np.ndarray
    residual_over_r: np.ndarray
    regular: np.ndarray  # residual / r < threshold * theta per radius
    counts: np.ndarray

    @property
    def monotone(self) -> bool:
        """residual / r shrinks as the radius shrinks."""
        order = np.argsort(self.radii)
        return bool(np.all(np.diff(self.residual_over_r[order]) >= -1e-12))


@dataclass
class BalanceReport:
    flux_integral: float
    residual_total: float
    trace_integral: float
    max_pairwise: float
    balanced: bool

    def rows(self):
        return [("flux_integral", self.flux_integral), ("residual_total", self.residual_total),
                ("trace_integral", self.trace_integral), ("max_pairwise_rel", self.max_pairwise),
                ("balanced", self.balanced)]


def _lambda(design) -> float:
    return float(design.params.lambda_pen)


def _interpolate(design, pts):
    grid = design.grid
    row, col = grid.to_index(pts[:, 0], pts[:, 1])
    return ndimage.map_coordinates(design.potential.values, [row, col], order=1, mode="nearest")


def _fb_tree(design, refine: int = 4):
    """Free-boundary samples plus a KD-tree on a refined polyline for point-to-boundary distances."""
    fb = free_boundary_samples(design.grid, design.potential.config)
    pts = fb.points
    # refine each sample into points spread along its tangent
    tang = np.stack([-fb.normals[:, 1], fb.normals[:, 0]], axis=1)
    offs = (np.arange(refine) + 0.5) / refine - 0.5
    dense = (pts[:, None, :] + offs[None, :, None] * fb.weights[:, None, None] * tang[:, None, :]).reshape(-1, 2)
    return fb, cKDTree(dense)


def lipschitz_report(design) -> RegularityReport:
    _, gx, gy, _, _ = cell_gradient_vectors(design.grid, design.medium, design.potential)
    lip = float(np.hypot(gx, gy).max()) if gx.size else 0.0
    return RegularityReport(lip_sup=lip, lip_ratio=lip / _lambda(design) ** (1.0 / design.medium.p))


def nondegeneracy_report(design, radii: Sequence[float], max_dist_cells: float = 6.0,
                         point_stride: int = 1, ball_stride: int = 8) -> RegularityReport:
    """Growth away from the free boundary: ``u / dist`` near it and ``sup_{B_r} u / r`` on balls centered on it.

    Points closer than 2h to the free boundary are skipped.
    """
    grid = design.grid
    h = grid.h
    radii = [float(r) for r in radii]
    if any(r < 4 * h - 1e-12 for r in radii):
        raise ValueError("radii must be at least 4h")
    fb, tree = _fb_tree(design)
    X, Y = grid.centers
    occ = design.potential.config.occupancy & ~grid.body_mask
    cells = np.flatnonzero(occ.ravel())[::point_stride]
    pts = np.stack([X.ravel()[cells], Y.ravel()[cells]], axis=1)
    dist, _ = tree.query(pts)
    near = (dist >= 2 * h) & (dist <= max_dist_cells * h)
    # only points whose nearest boundary is the free one (not the body)
    near &= grid.body_distance.ravel()[cells] > dist
    u = design.potential.values.ravel()[cells]
    rows = [(float(x), float(y), float(d), float(v), float(v / d))
            for (x, y), d, v in zip(pts[near], dist[near], u[near])]
    ratios = np.array([r[4] for r in rows]) if rows else np.array([np.nan])
    strong = []
    vals = design.potential.values
    for k in range(0, len(fb), ball_stride):
        z = fb.points[k]
        for r in radii:
            ball = np.hypot(X - z[0], Y - z[1]) <= r
            strong.append((float(z[0]), float(z[1]), r, float(vals[ball].max() / r)))
    lam = _lambda(design) ** (1.0 / design.medium.p)
    smin = min(s[3] for s in strong) if strong else float("nan")
    return RegularityReport(nondeg_rows=rows, nondeg_min=float(np.nanmin(ratios)),
                            nondeg_scaled=float(np.nanmin(ratios)) * lam, strong_rows=strong, strong_min=smin)


def density_report(design, radii: Sequence[float], stride: int = 8) -> GeometryReport:
    """Phase fractions and boundary length in balls centered on free-boundary samples."""
    grid = design.grid
    h = grid.h
    config = design.potential.config
    fb = free_boundary_samples(grid, config)
    warns = []
    gap = float(np.min(grid.body.signed_distance(fb.points[:, 0], fb.points[:, 1]))) \
        if hasattr(grid.body, "signed_distance") else float("inf")
    for r in radii:
        if r < 4 * h - 1e-12:
            raise ValueError("radii must be at least 4h")
        if r > gap / 2:
            warns.append(f"radius {r:.4g} exceeds half the body-to-boundary distance {gap:.4g}")
    X, Y = grid.centers
    occ = config.occupancy
    dens, haus = [], []
    for k in range(0, len(fb), stride):
        z = fb.points[k]
        d2 = np.hypot(X - z[0], Y - z[1])
        dpts = np.hypot(fb.points[:, 0] - z[0], fb.points[:, 1] - z[1])
        for r in radii:
            ball = d2 <= r
            frac = float(np.count_nonzero(occ & ball) / np.count_nonzero(ball))
            dens.append((float(z[0]), float(z[1]), float(r), frac, 1.0 - frac))
            haus.append((float(z[0]), float(z[1]), float(r), float(np.sum(fb.weights[dpts <= r]) / r)))
    varsigma = min(min(f, c) for _, _, _, f, c in dens)
    return GeometryReport(dens, haus, float(varsigma), warns)


def q_trace(design, band_cells: float = BAND_CELLS) -> TraceQ:
    """Boundary density of the residual measure: band masses spread onto nearby samples, per unit length.

    Each band cell's mass is shared among the samples within the band width
    with tent weights; the slope follows as ``(Q / a)^(1/(p-1))``.
    """
    grid = design.grid
    medium = design.medium
    h = grid.h
    fb = free_boundary_samples(grid, design.potential.config)
    res = residual_measure(grid, medium, design.potential)
    X, Y = grid.centers
    band_w = band_cells * h
    tree = cKDTree(fb.points)
    dist, _ = tree.query(np.stack([X.ravel(), Y.ravel()], axis=1))
    band = (dist <= band_w) & ~grid.body_mask.ravel() & (grid.body_distance.ravel() > band_w)
    cells = np.flatnonzero(band)
    mass = res.values.ravel()[cells] * h * h
    cpts = np.stack([X.ravel()[cells], Y.ravel()[cells]], axis=1)
    acc = np.zeros(len(fb))
    neighbours = tree.query_ball_point(cpts, band_w)
    for m, c, nb in zip(mass, cpts, neighbours):
        if not nb:
            continue
        nb = np.asarray(nb)
        d = np.hypot(fb.points[nb, 0] - c[0], fb.points[nb, 1] - c[1])
        w = fb.weights[nb] * np.maximum(1.0 - d / band_w, 0.0)
        if w.sum() <= 0:
            continue
        acc[nb] += m * w / w.sum()
    Q = acc / fb.weights
    r, c = grid.cell_of(fb.points[:, 0] - 0.5 * h * fb.normals[:, 0], fb.points[:, 1] - 0.5 * h * fb.normals[:, 1])
    a = medium.coeff[r, c]
    theta = np.maximum(Q / a, 0.0) ** (1.0 / (medium.p - 1))
    return TraceQ(fb.points, fb.weights, Q, theta)


def smoothed(trace: TraceQ, window_cells: float, h: float) -> np.ndarray:
    """Moving average of Q over samples within ``window_cells * h`` (for robust extrema)."""
    tree = cKDTree(trace.points)
    out = np.empty_like(trace.Q)
    for k, nb in enumerate(tree.query_ball_point(trace.points, window_cells * h)):
        out[k] = np.average(trace.Q[nb], weights=trace.weights[nb])
    return out


def blowup_slope(design, sample_index: int, radii: Sequence[float], min_cells: int = 12) -> BlowupFit:
    """Least-squares fit ``u(X) ~ theta <X - Z0, -nu>^+`` in balls around a free-boundary sample."""
    grid = design.grid
    h = grid.h
    fb = free_boundary_samples(grid, design.potential.config)
    z = fb.points[sample_index]
    inward = -fb.normals[sample_index]
    X, Y = grid.centers
    u = design.potential.values
    thetas, res, regular, counts = [], [], [], []
    radii = np.asarray(radii, float)
    if np.any(radii < 4 * h - 1e-12):
        raise ValueError("radii must be at least 4h")
    for r in radii:
        ball = np.hypot(X - z[0], Y - z[1]) <= r
        s = np.maximum((X[ball] - z[0]) * inward[0] + (Y[ball] - z[1]) * inward[1], 0.0)
        v = u[ball]
        if np.count_nonzero(v > 0) < min_cells:
            raise ValueError(f"insufficient positive cells in ball of radius {r:.4g}")
        th = float(s @ v / (s @ s))
        rms = float(np.sqrt(np.mean((v - th * s) ** 2)))
        thetas.append(th)
        res.append(rms / r)
        regular.append(rms / r < REDUCED_FIT_THRESHOLD * th)
        counts.append(int(ball.sum()))
    return BlowupFit(radii, np.array(thetas), np.array(res), np.array(regular), np.array(counts))


def flux_balance_report(design, tol: float = BALANCE_TOL) -> BalanceReport:
    """Body-boundary flux, total residual measure and boundary-trace integral, compared pairwise."""
    grid, medium, field = design.grid, design.medium, design.potential
    flux = flux_profile(grid, medium, field).integral
    total = residual_measure(grid, medium, field).total
    trace = q_trace(design).integral
    vals = [flux, total, trace]
    worst = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            worst = max(worst, abs(vals[i] - vals[j]) / max(abs(vals[i]), abs(vals[j]), 1e-300))
    return BalanceReport(flux, total, trace, worst, worst <= tol)
