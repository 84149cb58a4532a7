"""Command-line entry point: build a problem from a manifest, run one command, write GRD1/CSV outputs."""

from __future__ import annotations

import argparse
import math
import os
import sys
import traceback
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diagnostics as diag
from .fbsolvers import (BoundaryData, ObstacleSpec, minimize_E_tau, obstacle_complementarity, solve_obstacle)
from .functionals import Nonlinearity, PenaltyParams, Profile, flux_functional
from .grid import (Configuration, DiskBody, GridDomain, MaskBody, PolygonBody, box_filling, build_grid,
                   configuration_from_occupancy, disk_configuration, volume_excess)
from .io import (ensure_dir, read_csv, read_grd1, write_csv, write_flux_profile, write_grid_field,
                 write_solve_report)
from .manifest import ExperimentManifest, ManifestError, load_manifest
from .medium import Medium, checkerboard_coeff, random_coeff, smooth_collar
from .optimizer import (OptimizerConfig, Problem, brute_force_minimizer, evaluate_design, lambda_sweep,
                        minimize_penalized)
from .radial import RadialProblem, oracle_table
from .solver import AngularData, ConstantData, SolverSettings, flux_profile, residual_measure, solve_potential

COMMANDS = ("potential", "ac", "obstacle", "optimize", "sweep", "bruteforce", "diagnose", "oracle")
MANIFEST_ECHO = "manifest.resolved"
FAILED = "FAILED"


def _numbers(text: str, count: Optional[int] = None) -> list:
    vals = [float(t) for t in text.split(",")]
    if count is not None and len(vals) != count:
        raise ValueError(f"expected {count} comma-separated numbers, got {text!r}")
    return vals


def _split(spec: str):
    tag, _, arg = spec.partition(":")
    return tag.strip(), arg.strip()


@dataclass
class Experiment:
    manifest: ExperimentManifest
    grid: GridDomain
    medium: Medium
    phi: object
    nonlinearity: Nonlinearity
    params: PenaltyParams
    settings: SolverSettings
    opt: OptimizerConfig
    workers: int = 1

    def region(self) -> Configuration:
        tag, arg = _split(self.manifest.problem["region"])
        if tag == "box":
            return box_filling(self.grid)
        if tag == "disk":
            return disk_configuration(self.grid, float(arg))
        if tag == "file":
            dump = read_grd1(arg)
            return configuration_from_occupancy(self.grid, dump.values > 0.5)
        return self.budget_disk()

    def budget_disk(self) -> Configuration:
        radius = self.manifest.optimizer["init_radius"]
        if radius is None:
            r0 = self.grid.body_radius
            radius = math.sqrt(r0 ** 2 + self.params.iota / math.pi)
        return disk_configuration(self.grid, radius)


def _body(spec: str):
    tag, arg = _split(spec)
    if tag == "disk":
        cx, cy, r = _numbers(arg, 3)
        return DiskBody((cx, cy), r)
    if tag == "polygon":
        verts = [_numbers(v, 2) for v in arg.split(";") if v.strip()]
        return PolygonBody(tuple(map(tuple, verts)))
    return None  # mask bodies need the grid shape; see build_experiment


def _coeff(spec: str, grid: GridDomain) -> np.ndarray:
    tag, arg = _split(spec)
    if tag == "const":
        return np.full(grid.shape, float(arg))
    if tag == "checkerboard":
        v1, v2, period = _numbers(arg, 3)
        return checkerboard_coeff(grid, v1, v2, int(period))
    if tag == "random":
        lo, hi, seed = _numbers(arg, 3)
        return random_coeff(grid, lo, hi, int(seed))
    dump = read_grd1(arg)
    if dump.values.shape != grid.shape:
        raise ValueError(f"coefficient file {arg} has shape {dump.values.shape}, grid is {grid.shape}")
    return dump.values


def _weight(spec: str):
    tag, arg = _split(spec)
    if tag == "const":
        return float(arg)
    header, rows = read_csv(arg)
    col = header.index("weight") if "weight" in header else len(header) - 1
    return np.array([float(r[col]) for r in rows])


def build_experiment(m: ExperimentManifest, workers: Optional[int] = None, seed: Optional[int] = None) -> Experiment:
    pr, ob, so, op = m.problem, m.objective, m.solver, m.optimizer
    body = _body(pr["body"])
    if body is None:
        dump = read_grd1(_split(pr["body"])[1])
        body = MaskBody(dump.values > 0.5)
    grid = build_grid(pr["grid.box"], pr["grid.nx"], pr["grid.ny"], body)
    medium = Medium(pr["medium.p"], _coeff(pr["medium.coeff"], grid))
    medium.validate()
    if pr["medium.collar_smooth"]:
        delta0 = pr["medium.delta0"] or 0.5 * grid.clearance
        medium = smooth_collar(grid, medium, delta0)
    tag, arg = _split(pr["phi"])
    if tag == "const":
        phi = ConstantData(float(arg))
    else:
        base, amp, k = _numbers(arg, 3)
        phi = AngularData(base, amp, int(k), grid.body_center)
    nonlinearity = Nonlinearity(Profile.parse(ob["gamma.profile"]), _weight(ob["gamma.weight"]))
    nonlinearity.check(len(grid.boundary))
    params = PenaltyParams(ob["penalty.lambda"], ob["penalty.iota"])
    try:
        params.check_against(grid)
    except ValueError as err:
        raise ManifestError(m.lines.get(("objective", "penalty.iota")), str(err)) from None
    settings = SolverSettings(tol=so["tol"], max_iter=so["max_iter"], eta=so["eta"], theta_min=so["theta_min"])
    opt = OptimizerConfig(move_kind=op["move_kind"], max_outer_iter=op["max_outer_iter"], step=op["step"],
                          seed=m.seed if seed is None else seed, restart_count=op["restart_count"],
                          collar_width=op["collar_width"], patience=op["patience"],
                          exhaustive_check=op["exhaustive_check"])
    return Experiment(m, grid, medium, phi, nonlinearity, params, settings, opt,
                      so["workers"] if workers is None else workers)


# ---------------------------------------------------------------------------
# commands


def _write_design(out: str, ex: Experiment, design) -> None:
    write_grid_field(os.path.join(out, "design.grd1"), ex.grid, design.config.occupancy.astype(float))
    write_grid_field(os.path.join(out, "potential.grd1"), ex.grid, design.potential.values)
    write_csv(os.path.join(out, "trace.csv"), ("iter", "J", "excess", "J_lambda"), design.trace)
    write_csv(os.path.join(out, "summary.csv"), ("key", "value"), [
        ("J", design.J), ("penalty", design.penalty), ("J_lambda", design.J_lambda), ("excess", design.excess),
        ("iota", ex.params.iota), ("lambda", ex.params.lambda_pen), ("perimeter", design.perimeter),
        ("saturated", design.saturated)])


def cmd_potential(ex: Experiment, args, out: str) -> None:
    config = ex.region()
    field = solve_potential(ex.grid, ex.medium, config, ex.phi, ex.settings)
    prof = flux_profile(ex.grid, ex.medium, field)
    res = residual_measure(ex.grid, ex.medium, field)
    write_grid_field(os.path.join(out, "potential.grd1"), ex.grid, field.values)
    write_flux_profile(os.path.join(out, "flux.csv"), prof)
    write_solve_report(os.path.join(out, "solve.csv"), field.solve_report)
    write_csv(os.path.join(out, "summary.csv"), ("key", "value"), [
        ("flux_integral", prof.integral), ("J", flux_functional(ex.nonlinearity, prof)),
        ("residual_total", res.total), ("excess", volume_excess(ex.grid, config)),
        ("iterations", field.solve_report.iterations)])


def cmd_ac(ex: Experiment, args, out: str) -> None:
    tau = ex.manifest.objective["ac.tau"] if args.tau is None else args.tau
    eps0 = ex.manifest.objective["ac.eps_start"] if args.eps_start is None else args.eps_start
    stages = []
    field = minimize_E_tau(ex.grid, ex.medium, tau, BoundaryData(ex.region(), ex.phi), ex.settings,
                           eps_start=eps0, stages=stages)
    h2 = ex.grid.h ** 2
    rows = []
    for eps, f in stages:
        lip = float(np.max(np.hypot(*np.gradient(f.values, ex.grid.h))))
        pos = float(np.count_nonzero((f.values > eps) & ~ex.grid.body_mask) * h2)
        rows.append((eps, f.solve_report.iterations, f.solve_report.energy, pos, lip))
    write_grid_field(os.path.join(out, "ac.grd1"), ex.grid, field.values)
    write_csv(os.path.join(out, "stages.csv"), ("eps", "iterations", "energy", "positive_area", "lipschitz"), rows)
    write_solve_report(os.path.join(out, "solve.csv"), field.solve_report)


def cmd_obstacle(ex: Experiment, args, out: str) -> None:
    path = args.mask or ex.manifest.problem["obstacle.mask"]
    if not path:
        raise ValueError("obstacle needs a forbidden-set mask (--mask or problem obstacle.mask)")
    mask = read_grd1(path).values > 0.5
    field = solve_obstacle(ex.grid, ex.medium, ex.phi, ObstacleSpec(mask), ex.settings)
    comp = obstacle_complementarity(ex.grid, ex.medium, field)
    write_grid_field(os.path.join(out, "obstacle.grd1"), ex.grid, field.values)
    write_solve_report(os.path.join(out, "solve.csv"), field.solve_report)
    write_csv(os.path.join(out, "complementarity.csv"), ("key", "value"), [
        ("complementarity", comp.value), ("bound", comp.bound), ("positive_area", comp.area), ("ok", comp.ok)])


def cmd_optimize(ex: Experiment, args, out: str) -> None:
    design = minimize_penalized(ex.grid, ex.medium, ex.nonlinearity, ex.params, ex.phi, ex.opt,
                                ex.budget_disk() if ex.manifest.optimizer["init_radius"] else None, ex.settings)
    _write_design(out, ex, design)


def cmd_sweep(ex: Experiment, args, out: str) -> None:
    lambdas = _numbers(args.lambdas) if args.lambdas else ex.manifest.optimizer["lambdas"]
    problem = Problem(ex.grid, ex.medium, ex.nonlinearity, ex.params.iota, ex.phi, ex.opt, ex.settings,
                      ex.budget_disk() if ex.manifest.optimizer["init_radius"] else None)
    res = lambda_sweep(problem, lambdas)
    write_csv(os.path.join(out, "sweep.csv"), ("lambda", "excess", "J", "saturated"),
              [(r["lambda"], r["excess"], r["J"], r["saturated"]) for r in res.rows])
    write_csv(os.path.join(out, "summary.csv"), ("key", "value"),
              [("lambda0", "none" if res.lambda0 is None else res.lambda0)])


def cmd_bruteforce(ex: Experiment, args, out: str) -> None:
    op = ex.manifest.optimizer
    sectors = op["sectors"] if args.sectors is None else args.sectors
    count = op["levels"] if args.levels is None else args.levels
    levels = np.linspace(op["radius_lo"], op["radius_hi"], count).tolist() if count > 1 else [op["radius_lo"]]
    design = brute_force_minimizer(ex.grid, ex.medium, ex.nonlinearity, ex.params, ex.phi, sectors, levels,
                                   ex.settings, workers=ex.workers)
    _write_design(out, ex, design)
    write_csv(os.path.join(out, "bruteforce.csv"), [f"sector{k}" for k in range(sectors)] + ["J_lambda"],
              [tuple(levels[j] for j in combo) + (v,) for combo, v in design.evaluations])


def cmd_diagnose(ex: Experiment, args, out: str) -> None:
    src = args.design or out
    occ = read_grd1(os.path.join(src, "design.grd1")).values > 0.5
    design = evaluate_design(ex.grid, ex.medium, ex.nonlinearity, ex.params, ex.phi,
                             configuration_from_occupancy(ex.grid, occ), ex.settings)
    d = ex.manifest.diagnostics
    h = ex.grid.h
    radii = [c * h for c in d["radii_cells"]]
    lip = diag.lipschitz_report(design)
    nd = diag.nondegeneracy_report(design, radii, ball_stride=d["stride"])
    nd.lip_sup, nd.lip_ratio = lip.lip_sup, lip.lip_ratio
    write_csv(os.path.join(out, "regularity.csv"), ("quantity", "a", "b", "value"), nd.rows())
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        geo = diag.density_report(design, radii, stride=d["stride"])
    rows = [("density", x, y, r, f) for x, y, r, f, _ in geo.density_rows]
    rows += [("hausdorff", x, y, r, v) for x, y, r, v in geo.hausdorff_rows]
    rows.append(("varsigma", "", "", "", geo.varsigma_est))
    write_csv(os.path.join(out, "geometry.csv"), ("kind", "x", "y", "r", "value"), rows)
    tr = diag.q_trace(design, d["band_cells"])
    write_csv(os.path.join(out, "qtrace.csv"), ("x", "y", "weight", "Q", "theta"),
              [(p[0], p[1], w, q, t) for p, w, q, t in zip(tr.points, tr.weights, tr.Q, tr.theta)])
    bal = diag.flux_balance_report(design)
    write_csv(os.path.join(out, "balance.csv"), ("key", "value"), bal.rows() + list(tr.summary.items()))


def cmd_oracle(ex: Experiment, args, out: str) -> None:
    grid, medium = ex.grid, ex.medium
    if not isinstance(grid.body, DiskBody):
        raise ValueError("oracle needs a disk body")
    if np.ptp(medium.coeff) > 0 or not isinstance(ex.phi, ConstantData):
        raise ValueError("oracle needs a constant coefficient and constant data")
    w = np.asarray(ex.nonlinearity.weight, float)
    if w.ndim:
        raise ValueError("oracle needs a constant weight")
    prob = RadialProblem(grid.body.radius, ex.phi.value, medium.p, float(medium.coeff.flat[0]),
                         ex.nonlinearity.profile, float(w))
    table = oracle_table(prob, ex.params.iota, ex.params.lambda_pen)
    write_csv(os.path.join(out, "oracle.csv"), ("r", "u", "flux", "J"), table.profile_rows)
    write_csv(os.path.join(out, "oracle_summary.csv"), ("key", "value"), table.summary)


HANDLERS = {"potential": cmd_potential, "ac": cmd_ac, "obstacle": cmd_obstacle, "optimize": cmd_optimize,
            "sweep": cmd_sweep, "bruteforce": cmd_bruteforce, "diagnose": cmd_diagnose, "oracle": cmd_oracle}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="insulopt", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--manifest", "--config", dest="manifest", required=True, help="experiment manifest")
    ap.add_argument("--out", help="output directory (default $INSULOPT_OUT/<command> or ./insulopt_out/<command>)")
    ap.add_argument("--workers", type=int, help="override solver workers")
    ap.add_argument("--seed", type=int, help="override the manifest seed")
    ap.add_argument("--tau", type=float, help="ac: phase penalty")
    ap.add_argument("--eps-start", type=float, help="ac: initial smoothing width")
    ap.add_argument("--mask", help="obstacle: GRD1 forbidden-set mask")
    ap.add_argument("--lambdas", help="sweep: comma-separated penalty slopes")
    ap.add_argument("--sectors", type=int, help="bruteforce: number of angular sectors")
    ap.add_argument("--levels", type=int, help="bruteforce: number of radius levels")
    ap.add_argument("--design", help="diagnose: directory holding design.grd1")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)  # exits 2 with usage on an unknown command
    root = os.environ.get("INSULOPT_OUT", "insulopt_out")
    out = ensure_dir(args.out or os.path.join(root, args.command))
    failed = os.path.join(out, FAILED)
    if os.path.exists(failed):
        os.remove(failed)
    try:
        manifest = load_manifest(args.manifest)
        if args.seed is not None:
            manifest.seed = args.seed
        if args.workers is not None:
            manifest.solver["workers"] = args.workers
        with open(os.path.join(out, MANIFEST_ECHO), "w", encoding="utf-8") as f:
            f.write(manifest.resolved())
        ex = build_experiment(manifest)
        HANDLERS[args.command](ex, args, out)
    except Exception as err:  # any failure leaves partial outputs plus a marker
        with open(failed, "w", encoding="utf-8") as f:
            f.write(f"{type(err).__name__}: {err}\n")
            f.write(traceback.format_exc())
        print(f"insulopt {args.command}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
