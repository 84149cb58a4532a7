"""Experiment manifests: ``key = value`` lines grouped in sections, validated with line numbers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

SCHEMA_VERSION = 1
SECTIONS = ("problem", "objective", "solver", "optimizer", "diagnostics")
REQUIRED = (("problem", "body"), ("problem", "phi"), ("problem", "medium.p"),
            ("objective", "penalty.lambda"), ("objective", "penalty.iota"))


class ManifestError(ValueError):
    def __init__(self, line: Optional[int], message: str):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(text):
    return int(text)


def _bool(text):
    t = text.lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _auto(conv):
    def parse(text):
        return None if text.lower() == "auto" else conv(text)
    return parse


def _floats(text):
    vals = [_float(t) for t in text.split(",") if t.strip()]
    if not vals:
        raise ValueError("expected a comma-separated list of numbers")
    return vals


def _tagged(*tags):
    def parse(text):
        tag = text.split(":", 1)[0].strip()
        if tag not in tags:
            raise ValueError(f"expected one of {', '.join(t + ':' if t != 'linear' else t for t in tags)}")
        return text.strip()
    return parse


def _choice(*names):
    def parse(text):
        if text not in names:
            raise ValueError(f"expected one of {', '.join(names)}")
        return text
    return parse


def _positive(v):
    return v is None or v > 0


def _nonneg(v):
    return v is None or v >= 0


@dataclass(frozen=True)
class Key:
    parse: Callable
    default: object
    check: Optional[Callable] = None
    message: str = ""


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    return str(v)


SCHEMA = {
    "problem": {
        "grid.box": Key(_floats, [-2.0, 2.0, -2.0, 2.0], lambda v: len(v) == 4 and v[0] < v[1] and v[2] < v[3],
                        "grid.box must be xmin,xmax,ymin,ymax with xmin < xmax and ymin < ymax"),
        "grid.nx": Key(_int, 128, lambda v: v >= 8, "grid.nx must be at least 8"),
        "grid.ny": Key(_int, 128, lambda v: v >= 8, "grid.ny must be at least 8"),
        "body": Key(_tagged("disk", "polygon", "mask"), None),
        "phi": Key(_tagged("const", "cos"), None),
        "medium.p": Key(_float, None, lambda v: v > 1, "medium.p must exceed 1"),
        "medium.coeff": Key(_tagged("const", "checkerboard", "file", "random"), "const:1"),
        "medium.collar_smooth": Key(_bool, False),
        "medium.delta0": Key(_auto(_float), None, _positive, "medium.delta0 must be positive"),
        "region": Key(_tagged("budget", "box", "disk", "file"), "budget"),
        "obstacle.mask": Key(str, ""),
    },
    "objective": {
        "gamma.profile": Key(_tagged("linear", "power", "exp"), "linear"),
        "gamma.weight": Key(_tagged("const", "file"), "const:1"),
        "penalty.lambda": Key(_float, None, lambda v: v > 0, "penalty.lambda must be positive"),
        "penalty.iota": Key(_float, None, lambda v: v > 0, "iota must be positive"),
        "ac.tau": Key(_float, 1.0, _nonneg, "ac.tau must be nonnegative"),
        "ac.eps_start": Key(_auto(_float), None, _positive, "ac.eps_start must be positive"),
    },
    "solver": {
        "tol": Key(_float, 1e-9, lambda v: v > 0, "tol must be positive"),
        "max_iter": Key(_int, 500, lambda v: v >= 1, "max_iter must be at least 1"),
        "eta": Key(_auto(_float), None, _nonneg, "eta must be nonnegative"),
        "theta_min": Key(_float, 0.02, lambda v: 0 < v <= 0.5, "theta_min must lie in (0, 0.5]"),
        "workers": Key(_int, 1, lambda v: v >= 1, "workers must be at least 1"),
    },
    "optimizer": {
        "move_kind": Key(_choice("exchange", "levelset"), "exchange"),
        "max_outer_iter": Key(_int, 400, lambda v: v >= 1, "max_outer_iter must be at least 1"),
        "step": Key(_int, 64, lambda v: v >= 1, "step must be at least 1"),
        "restart_count": Key(_int, 0, lambda v: v >= 0, "restart_count must be nonnegative"),
        "collar_width": Key(_auto(_float), None, _positive, "collar_width must be positive"),
        "patience": Key(_int, 8, lambda v: v >= 1, "patience must be at least 1"),
        "exhaustive_check": Key(_bool, False),
        "init_radius": Key(_auto(_float), None, _positive, "init_radius must be positive"),
        "lambdas": Key(_floats, [1.0, 10.0, 50.0, 200.0],
                       lambda v: len(v) >= 3 and all(b > a for a, b in zip(v, v[1:])),
                       "lambdas must be strictly increasing with at least three values"),
        "sectors": Key(_int, 8, lambda v: 1 <= v <= 10, "sectors must lie in 1..10"),
        "levels": Key(_int, 4, lambda v: 1 <= v <= 5, "levels must lie in 1..5"),
        "radius_lo": Key(_float, 0.8, lambda v: v > 0, "radius_lo must be positive"),
        "radius_hi": Key(_float, 1.1, lambda v: v > 0, "radius_hi must be positive"),
    },
    "diagnostics": {
        "radii_cells": Key(_floats, [8.0, 16.0, 32.0], lambda v: min(v) >= 4, "radii_cells must be at least 4"),
        "blowup_cells": Key(_floats, [16.0, 12.0, 8.0], lambda v: min(v) >= 4, "blowup_cells must be at least 4"),
        "stride": Key(_int, 8, lambda v: v >= 1, "stride must be at least 1"),
        "band_cells": Key(_float, 3.0, lambda v: v > 0, "band_cells must be positive"),
    },
}
TOP = {
    "seed": Key(_int, 0, lambda v: v >= 0, "seed must be nonnegative"),
    "schema_version": Key(_int, SCHEMA_VERSION, lambda v: v == SCHEMA_VERSION,
                          f"schema_version must be {SCHEMA_VERSION}"),
}


@dataclass
class ExperimentManifest:
    problem: dict
    objective: dict
    solver: dict
    optimizer: dict
    diagnostics: dict
    seed: int = 0
    schema_version: int = SCHEMA_VERSION
    lines: dict = field(default_factory=dict)  # (section, key) -> line number

    def section(self, name: str) -> dict:
        return getattr(self, name)

    def resolved(self) -> str:
        """Every key with its value, defaults included, in canonical order."""
        out = [f"seed = {self.seed}", f"schema_version = {self.schema_version}"]
        for sec in SECTIONS:
            out.append("")
            out.append(f"[{sec}]")
            vals = self.section(sec)
            for key in SCHEMA[sec]:
                out.append(f"{key} = {_fmt(vals[key])}")
        return "\n".join(out) + "\n"


def _convert(spec: Key, raw: str, key: str, lineno: int):
    try:
        v = spec.parse(raw)
    except ValueError as err:
        raise ManifestError(lineno, f"{key}: invalid value {raw!r} ({err})") from None
    if spec.check is not None and not spec.check(v):
        raise ManifestError(lineno, spec.message or f"{key}: constraint violated")
    return v


def parse_manifest(text: str) -> ExperimentManifest:
    values = {sec: {} for sec in SECTIONS}
    top = {}
    lines = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]") or s[1:-1].strip() not in SECTIONS:
                raise ManifestError(lineno, f"unknown section {s!r}")
            section = s[1:-1].strip()
            continue
        if "=" not in s:
            raise ManifestError(lineno, f"expected 'key = value', got {s!r}")
        key, raw = (t.strip() for t in s.split("=", 1))
        schema = TOP if section is None else SCHEMA[section]
        where = "top level" if section is None else f"[{section}]"
        if key not in schema:
            raise ManifestError(lineno, f"unknown key {key!r} in {where}")
        if (section, key) in lines:
            raise ManifestError(lineno, f"duplicate key {key!r} (first set on line {lines[(section, key)]})")
        lines[(section, key)] = lineno
        v = _convert(schema[key], raw, key, lineno)
        (top if section is None else values[section])[key] = v
    for sec, key in REQUIRED:
        if key not in values[sec]:
            raise ManifestError(None, f"missing required key {key!r} in [{sec}]")
    for sec in SECTIONS:
        for key, spec in SCHEMA[sec].items():
            values[sec].setdefault(key, spec.default)
    m = ExperimentManifest(**values, seed=top.get("seed", 0),
                           schema_version=top.get("schema_version", SCHEMA_VERSION), lines=lines)
    _cross_checks(m)
    return m


def _cross_checks(m: ExperimentManifest) -> None:
    xlo, xhi, ylo, yhi = m.problem["grid.box"]
    nx, ny = m.problem["grid.nx"], m.problem["grid.ny"]
    if not math.isclose((xhi - xlo) / nx, (yhi - ylo) / ny, rel_tol=1e-9):
        raise ManifestError(m.lines.get(("problem", "grid.box")), "cells must be square: box aspect must match nx:ny")
    area = (xhi - xlo) * (yhi - ylo)
    if m.objective["penalty.iota"] >= area:
        raise ManifestError(m.lines.get(("objective", "penalty.iota")),
                            f"iota must be below the box area {area!r}")
    if m.optimizer["radius_hi"] < m.optimizer["radius_lo"]:
        raise ManifestError(m.lines.get(("optimizer", "radius_hi")), "radius_hi must not be below radius_lo")


def load_manifest(path) -> ExperimentManifest:
    with open(path, encoding="utf-8") as f:
        return parse_manifest(f.read())
