"""Cartesian grid, the fixed body, insulating configurations and boundary samples.

All arrays are indexed ``[row, col]`` with row 0 at the bottom of the box, so
``values[j, i]`` lives at ``(ox + (i + 1/2) h, oy + (j + 1/2) h)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from skimage import measure

MIN_CELLS = 8
CLEARANCE_CELLS = 4
IRREGULAR_RATIO = 20.0  # perimeter / sqrt(area) above which a boundary is flagged
SMOOTHING_SIGMA = 1.0  # cells, for contouring a bare occupancy field

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class GeometryWarning(UserWarning):
    """Raised for recoverable geometric oddities (clipped or irregular boundaries)."""


# ---------------------------------------------------------------------------
# bodies


@dataclass(frozen=True)
class DiskBody:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"degenerate body: disk radius {self.radius!r} must be positive")

    @property
    def kind(self) -> str:
        return "disk"

    def extent(self):
        cx, cy = self.center
        r = self.radius
        return cx - r, cx + r, cy - r, cy + r

    def signed_distance(self, x, y):
        cx, cy = self.center
        return np.hypot(np.asarray(x, float) - cx, np.asarray(y, float) - cy) - self.radius

    def crossing(self, x0, y0, x1, y1):
        """Fraction t in (0, 1] where the segment from outside point 0 to inside point 1 hits the circle."""
        cx, cy = self.center
        dx, dy = x1 - x0, y1 - y0
        fx, fy = x0 - cx, y0 - cy
        a = dx * dx + dy * dy
        b = 2.0 * (fx * dx + fy * dy)
        c = fx * fx + fy * fy - self.radius ** 2
        disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
        return np.clip((-b - disc) / (2 * a), 0.0, 1.0)

    def boundary_samples(self, h: float) -> "BoundarySamples":
        cx, cy = self.center
        # a multiple of 8 keeps the sample set invariant under the square's symmetries
        n = max(16, 8 * int(math.ceil(2 * math.pi * self.radius / h / 8)))
        ang = (np.arange(n) + 0.5) * (2 * math.pi / n)
        out = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = np.array([cx, cy]) + self.radius * out
        w = np.full(n, 2 * math.pi * self.radius / n)
        return BoundarySamples(pts, -out, w, "fixed_boundary")


def _point_in_polygon(x, y, verts):
    inside = np.zeros(np.shape(x), dtype=bool)
    n = len(verts)
    for k in range(n):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % n]
        cond = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (x < xc)
    return inside


@dataclass(frozen=True)
class PolygonBody:
    vertices: tuple

    def __post_init__(self):
        v = np.asarray(self.vertices, float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("degenerate body: polygon needs at least three vertices")
        area = 0.5 * np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if abs(area) < 1e-14:
            raise ValueError("degenerate body: polygon has zero area")
        if area < 0:  # store counter-clockwise
            v = v[::-1]
        object.__setattr__(self, "vertices", tuple(map(tuple, v)))

    @property
    def kind(self) -> str:
        return "polygon"

    def extent(self):
        v = np.asarray(self.vertices)
        return v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max()

    def signed_distance(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        v = np.asarray(self.vertices)
        best = np.full(x.shape, np.inf)
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            e = b - a
            t = np.clip(((x - a[0]) * e[0] + (y - a[1]) * e[1]) / (e @ e), 0.0, 1.0)
            best = np.minimum(best, np.hypot(x - a[0] - t * e[0], y - a[1] - t * e[1]))
        return np.where(_point_in_polygon(x, y, v), -best, best)

    def crossing(self, x0, y0, x1, y1):
        v = np.asarray(self.vertices)
        t_best = np.ones(np.shape(x0))
        dx, dy = x1 - x0, y1 - y0
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            ex, ey = b - a
            den = dx * ey - dy * ex
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((a[0] - x0) * ey - (a[1] - y0) * ex) / den
                s = ((a[0] - x0) * dy - (a[1] - y0) * dx) / den
            hit = (np.abs(den) > 1e-300) & (t >= 0) & (t <= 1) & (s >= 0) & (s <= 1)
            t_best = np.where(hit & (t < t_best), t, t_best)
        return t_best

    def boundary_samples(self, h: float) -> "BoundarySamples":
        v = np.asarray(self.vertices)
        pts, nrm, wts = [], [], []
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            e = b - a
            length = float(np.hypot(*e))
            m = max(1, int(math.ceil(length / h)))
            t = (np.arange(m) + 0.5) / m
            pts.append(a + t[:, None] * e)
            # counter-clockwise orientation: the left normal points into the body
            inward = np.array([-e[1], e[0]]) / length
            nrm.append(np.repeat(inward[None, :], m, axis=0))
            wts.append(np.full(m, length / m))
        return BoundarySamples(np.concatenate(pts), np.concatenate(nrm), np.concatenate(wts), "fixed_boundary")


@dataclass(frozen=True, eq=False)
class MaskBody:
    """Body given as an explicit cell mask on the grid it will be attached to."""

    mask: np.ndarray

    @property
    def kind(self) -> str:
        return "mask"


Body = Union[DiskBody, PolygonBody, MaskBody]


# ---------------------------------------------------------------------------
# boundary samples


class BoundarySample(NamedTuple):
    point: np.ndarray
    normal: np.ndarray
    weight: float
    side: str


@dataclass(frozen=True, eq=False)
class BoundarySamples:
    """Vectorized set of boundary samples; iterating yields :class:`BoundarySample`."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    side: str
    component: Optional[np.ndarray] = None

    def __post_init__(self):
        nrm = np.asarray(self.normals, float)
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        object.__setattr__(self, "normals", nrm)
        if np.any(np.asarray(self.weights) <= 0):
            raise ValueError("boundary sample weights must be positive")

    def __len__(self) -> int:
        return len(self.weights)

    def __iter__(self) -> Iterator[BoundarySample]:
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k) -> BoundarySample:
        return BoundarySample(self.points[k], self.normals[k], float(self.weights[k]), self.side)

    @property
    def length(self) -> float:
        return float(np.sum(self.weights))

    @property
    def arclength(self) -> np.ndarray:
        """Arc-length coordinate of each sample (midpoint rule along the ordering)."""
        w = np.asarray(self.weights)
        return np.cumsum(w) - 0.5 * w


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class GridDomain:
    nx: int
    ny: int
    h: float
    origin: tuple
    body: Body
    body_mask: np.ndarray
    boundary: BoundarySamples

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def body_kind(self) -> str:
        return self.body.kind

    @property
    def box(self):
        ox, oy = self.origin
        return (ox, ox + self.nx * self.h, oy, oy + self.ny * self.h)

    @cached_property
    def xc(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.h

    @cached_property
    def yc(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.h

    @cached_property
    def centers(self):
        """Cell-center coordinate arrays ``(X, Y)`` of shape ``(ny, nx)``."""
        return np.meshgrid(self.xc, self.yc)

    @cached_property
    def body_distance(self) -> np.ndarray:
        """Signed distance from each cell center to the body boundary (negative inside)."""
        if isinstance(self.body, MaskBody):
            m = self.body_mask
            outside = ndimage.distance_transform_edt(~m) * self.h - 0.5 * self.h
            inside = ndimage.distance_transform_edt(m) * self.h - 0.5 * self.h
            return np.where(m, -inside, outside)
        X, Y = self.centers
        return self.body.signed_distance(X, Y)

    @property
    def body_center(self):
        if isinstance(self.body, DiskBody):
            return tuple(self.body.center)
        X, Y = self.centers
        m = self.body_mask
        return (float(X[m].mean()), float(Y[m].mean()))

    @property
    def body_radius(self) -> float:
        """Radius of the body for disks, area-equivalent radius otherwise."""
        if isinstance(self.body, DiskBody):
            return float(self.body.radius)
        return math.sqrt(self.body_mask.sum() * self.h ** 2 / math.pi)

    @cached_property
    def clearance(self) -> float:
        xlo, xhi, ylo, yhi = self.box
        bx0, bx1, by0, by1 = _body_extent(self)
        return float(min(bx0 - xlo, xhi - bx1, by0 - ylo, yhi - by1))

    def to_index(self, x, y):
        """Continuous (row, col) index coordinates of points, cell centers at integers."""
        col = (np.asarray(x, float) - self.origin[0]) / self.h - 0.5
        row = (np.asarray(y, float) - self.origin[1]) / self.h - 0.5
        return row, col

    def cell_of(self, x, y):
        row, col = self.to_index(x, y)
        r = np.clip(np.rint(row).astype(int), 0, self.ny - 1)
        c = np.clip(np.rint(col).astype(int), 0, self.nx - 1)
        return r, c

    def body_crossing(self, x0, y0, x1, y1):
        if isinstance(self.body, MaskBody):
            return np.full(np.shape(x0), 0.5)
        return self.body.crossing(x0, y0, x1, y1)


def _body_extent(grid: GridDomain):
    if isinstance(grid.body, MaskBody):
        rows, cols = np.nonzero(grid.body_mask)
        ox, oy = grid.origin
        h = grid.h
        return ox + cols.min() * h, ox + (cols.max() + 1) * h, oy + rows.min() * h, oy + (rows.max() + 1) * h
    return grid.body.extent()


def _mask_boundary_samples(mask: np.ndarray, origin, h) -> BoundarySamples:
    field = ndimage.gaussian_filter(mask.astype(float), SMOOTHING_SIGMA, mode="nearest")
    return _isoline_samples(field, 0.5, origin, h, "fixed_boundary", outward=False)


def build_grid(box: Sequence[float], nx: int, ny: int, body_kind: Body) -> GridDomain:
    """Rasterize a body on a square-cell grid covering ``box = (xmin, xmax, ymin, ymax)``."""
    xmin, xmax, ymin, ymax = map(float, box)
    if nx < MIN_CELLS or ny < MIN_CELLS:
        raise ValueError(f"grid needs at least {MIN_CELLS} cells per side, got {nx}x{ny}")
    hx = (xmax - xmin) / nx
    hy = (ymax - ymin) / ny
    if hx <= 0 or hy <= 0:
        raise ValueError(f"empty box {box}")
    if abs(hx - hy) > 1e-12 * max(hx, hy):
        raise ValueError(f"cells must be square: hx={hx} hy={hy}")
    h = hx
    origin = (xmin, ymin)
    xc = xmin + (np.arange(nx) + 0.5) * h
    yc = ymin + (np.arange(ny) + 0.5) * h
    X, Y = np.meshgrid(xc, yc)

    if isinstance(body_kind, MaskBody):
        mask = np.asarray(body_kind.mask, bool)
        if mask.shape != (ny, nx):
            raise ValueError(f"body mask shape {mask.shape} does not match grid {(ny, nx)}")
        if not mask.any():
            raise ValueError("degenerate body: empty mask")
        samples = None
    else:
        mask = body_kind.signed_distance(X, Y) < 0
        if not mask.any():
            raise ValueError("degenerate body: no cell center falls inside the body")
        samples = body_kind.boundary_samples(h)

    grid = GridDomain(nx, ny, h, origin, body_kind, mask, samples)
    need = CLEARANCE_CELLS * h
    if grid.clearance < need - 1e-12:
        bx0, bx1, by0, by1 = _body_extent(grid)
        raise ValueError(
            "body too close to the box edge: clearance report "
            f"left={bx0 - xmin:.6g} right={xmax - bx1:.6g} bottom={by0 - ymin:.6g} top={ymax - by1:.6g}, "
            f"required >= {need:.6g} (4h)"
        )
    _, nlab = ndimage.label(mask, structure=FOUR_CONNECTED)
    if nlab != 1:
        raise ValueError(f"body mask must be 4-connected, found {nlab} components")
    if samples is None:
        object.__setattr__(grid, "boundary", _mask_boundary_samples(mask, origin, h))
    return grid


# ---------------------------------------------------------------------------
# configurations


@dataclass(frozen=True, eq=False)
class Configuration:
    """Insulating region as cell occupancy, optionally backed by a level set (>= 0 inside)."""

    occupancy: np.ndarray
    level_set: Optional[np.ndarray] = None

    @property
    def key(self) -> bytes:
        return np.packbits(self.occupancy).tobytes()


def _components_touching_body(grid: GridDomain, occ: np.ndarray) -> np.ndarray:
    lab, _ = ndimage.label(occ, structure=FOUR_CONNECTED)
    keep = np.unique(lab[grid.body_mask])
    keep = keep[keep > 0]
    return np.isin(lab, keep)


def configuration_from_occupancy(grid: GridDomain, occupancy, level_set=None, repair: bool = True) -> Configuration:
    """Build a configuration; the body is always added and, with ``repair``, stray components dropped."""
    occ = np.asarray(occupancy, bool) | grid.body_mask
    if occ.shape != grid.shape:
        raise ValueError(f"occupancy shape {occ.shape} does not match grid {grid.shape}")
    if repair:
        occ = _components_touching_body(grid, occ)
    ls = None if level_set is None else np.asarray(level_set, float)
    return Configuration(occ, ls)


def level_set_configuration(grid: GridDomain, level_set, repair: bool = True) -> Configuration:
    ls = np.asarray(level_set, float)
    return configuration_from_occupancy(grid, ls >= 0, ls, repair)


def body_configuration(grid: GridDomain) -> Configuration:
    return Configuration(grid.body_mask.copy())


def disk_configuration(grid: GridDomain, radius: float, center=None) -> Configuration:
    cx, cy = grid.body_center if center is None else center
    X, Y = grid.centers
    return level_set_configuration(grid, radius - np.hypot(X - cx, Y - cy))


def box_filling(grid: GridDomain) -> Configuration:
    """Every cell except the outermost ring."""
    occ = np.zeros(grid.shape, bool)
    occ[1:-1, 1:-1] = True
    return configuration_from_occupancy(grid, occ)


def half_plane_configuration(grid: GridDomain, point, normal) -> Configuration:
    """Cells on the side of the line opposite to ``normal`` (which is the outward normal)."""
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    X, Y = grid.centers
    ls = -((X - point[0]) * n[0] + (Y - point[1]) * n[1])
    return level_set_configuration(grid, ls)


def sector_index(grid: GridDomain, sectors: int, center=None) -> np.ndarray:
    cx, cy = grid.body_center if center is None else center
    X, Y = grid.centers
    ang = np.mod(np.arctan2(Y - cy, X - cx), 2 * math.pi)
    return np.minimum((ang / (2 * math.pi) * sectors).astype(int), sectors - 1)


def star_configuration(grid: GridDomain, radii: Sequence[float], center=None) -> Configuration:
    """Star-shaped region whose boundary radius is constant on each of ``len(radii)`` equal sectors."""
    radii = np.asarray(radii, float)
    cx, cy = grid.body_center if center is None else center
    X, Y = grid.centers
    sec = sector_index(grid, len(radii), (cx, cy))
    occ = np.hypot(X - cx, Y - cy) <= radii[sec]
    return configuration_from_occupancy(grid, occ)


def validate_configuration(grid: GridDomain, config: Configuration) -> None:
    occ = config.occupancy
    if occ.shape != grid.shape or occ.dtype != bool:
        raise ValueError("occupancy must be a boolean array on the grid")
    if np.any(grid.body_mask & ~occ):
        raise ValueError("configuration must contain the body")
    if np.any(occ & ~_components_touching_body(grid, occ)):
        raise ValueError("occupied cells must form one 4-connected set containing the body")
    if config.level_set is not None and config.level_set.shape != grid.shape:
        raise ValueError("level set shape does not match grid")


# ---------------------------------------------------------------------------
# volumes, perimeters, free boundaries


def volume_excess(grid: GridDomain, config: Configuration) -> float:
    return grid.h ** 2 * int(np.count_nonzero(config.occupancy & ~grid.body_mask))


def contour_field(config: Configuration):
    """Field and level whose isoline represents the boundary of the region (higher inside)."""
    if config.level_set is not None:
        return config.level_set, 0.0
    field = ndimage.gaussian_filter(config.occupancy.astype(float), SMOOTHING_SIGMA, mode="nearest")
    return field, 0.5


def _isoline_samples(field, level, origin, h, side, outward=True, min_points=0):
    contours = measure.find_contours(field, level)
    pts, wts, comp = [], [], []
    for k, c in enumerate(contours):
        if len(c) < 2:
            continue
        seg = np.diff(c, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        mid = 0.5 * (c[1:] + c[:-1])
        keep = lengths > 1e-12
        pts.append(mid[keep])
        wts.append(lengths[keep] * h)
        comp.append(np.full(int(keep.sum()), k))
    if not pts:
        return None
    rc = np.concatenate(pts)
    gy, gx = np.gradient(field)
    coords = [rc[:, 0], rc[:, 1]]
    grad = np.stack(
        [ndimage.map_coordinates(gx, coords, order=1, mode="nearest"),
         ndimage.map_coordinates(gy, coords, order=1, mode="nearest")], axis=1)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    bad = norm[:, 0] < 1e-300
    if np.any(bad):  # fall back to the contour tangent rotated
        raise ValueError("flat field at isoline sample; cannot orient normal")
    normals = -grad / norm if outward else grad / norm
    xy = np.stack([origin[0] + (rc[:, 1] + 0.5) * h, origin[1] + (rc[:, 0] + 0.5) * h], axis=1)
    return BoundarySamples(xy, normals, np.concatenate(wts), side, np.concatenate(comp))


def _touches_edge(occ: np.ndarray) -> bool:
    return bool(occ[0].any() or occ[-1].any() or occ[:, 0].any() or occ[:, -1].any())


def perimeter_estimate(grid: GridDomain, config: Configuration) -> float:
    """Length of the boundary isoline of the region.

    Warns with :class:`GeometryWarning` when the region runs into the box edge
    ("boundary clipped") or when perimeter / sqrt(area) exceeds 20
    ("irregular boundary").  For the flag the perimeter is the larger of the
    isoline length and the raster face length times pi/4 (its mean overcount
    on smooth curves), since smoothing hides cell-scale raggedness.
    """
    field, level = contour_field(config)
    samples = _isoline_samples(field, level, grid.origin, grid.h, "free_boundary")
    if _touches_edge(config.occupancy):
        warnings.warn("boundary clipped: region touches the box edge", GeometryWarning, stacklevel=2)
    if samples is None:
        return 0.0
    length = samples.length
    area = np.count_nonzero(config.occupancy) * grid.h ** 2
    ratio = max(length, 0.25 * math.pi * raster_perimeter(grid, config)) / math.sqrt(area) if area > 0 else 0.0
    if ratio > IRREGULAR_RATIO:
        warnings.warn(f"irregular boundary: perimeter/sqrt(area) = {ratio:.3g} > {IRREGULAR_RATIO}",
                      GeometryWarning, stacklevel=2)
    return length


def raster_perimeter(grid: GridDomain, config: Configuration) -> float:
    """Total length of cell faces between occupied and empty cells inside the box."""
    occ = config.occupancy
    faces = np.count_nonzero(occ[1:, :] != occ[:-1, :]) + np.count_nonzero(occ[:, 1:] != occ[:, :-1])
    return float(faces * grid.h)


def free_boundary_samples(grid: GridDomain, config: Configuration) -> BoundarySamples:
    """Samples of the free boundary with outward unit normals and arc-length weights."""
    if not np.any(config.occupancy & ~grid.body_mask):
        raise ValueError("no free boundary: the configuration equals the body")
    field, level = contour_field(config)
    samples = _isoline_samples(field, level, grid.origin, grid.h, "free_boundary")
    if samples is None:
        raise ValueError("no free boundary: the isoline is empty (region fills the box)")
    return samples


def collar(grid: GridDomain, dist: float) -> np.ndarray:
    """Mask of non-body cells whose center lies within ``dist`` of the body boundary."""
    if not 0 < dist < grid.clearance:
        raise ValueError(f"collar width {dist} must lie in (0, clearance={grid.clearance:.6g})")
    return ~grid.body_mask & (grid.body_distance <= dist)
