"""Plain-text grid dumps (GRD1) and CSV tables."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAGIC = "GRD1"


@dataclass
class GridDump:
    values: np.ndarray  # shape (ny, nx), row 0 at the bottom
    h: float
    origin: tuple

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def ny(self) -> int:
        return self.values.shape[0]


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_grd1(path, values, h: float, origin) -> None:
    """Header ``GRD1 nx ny h ox oy`` then one line per grid row, bottom row first."""
    arr = np.asarray(values, float)
    if arr.ndim != 2:
        raise ValueError("GRD1 holds 2-D fields")
    ny, nx = arr.shape
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{MAGIC} {nx} {ny} {_fmt(h)} {_fmt(origin[0])} {_fmt(origin[1])}\n")
        for row in arr:
            f.write(" ".join(_fmt(v) for v in row) + "\n")


def write_grid_field(path, grid, values) -> None:
    write_grd1(path, values, grid.h, grid.origin)


def read_grd1(path) -> GridDump:
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 6 or header[0] != MAGIC:
            raise ValueError(f"{path}: not a GRD1 file (header {' '.join(header)!r})")
        nx, ny = int(header[1]), int(header[2])
        h, ox, oy = float(header[3]), float(header[4]), float(header[5])
        data = np.array(f.read().split(), dtype=float)
    if data.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {data.size}")
    return GridDump(data.reshape(ny, nx), h, (ox, oy))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return _fmt(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def write_flux_profile(path, profile) -> None:
    write_csv(path, ("s", "x", "y", "flux"), profile.rows())


def write_solve_report(path, report) -> None:
    write_csv(path, ("iter", "energy", "grad_norm"), report.history)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
