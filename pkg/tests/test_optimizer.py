import math

import numpy as np
import pytest
from scipy import ndimage

from insulopt import (DiskBody, Medium, Nonlinearity, OptimizerConfig, PenaltyParams, PerturbationSpec, Problem,
                      brute_force_minimizer, build_grid, collar, disk_configuration, energy, energy_differential,
                      lambda_sweep, minimize_penalized, perturb_inward, solve_potential, volume_differential)
from insulopt.grid import half_plane_configuration, volume_excess
from insulopt.optimizer import BUMP_MAX_SLOPE, m2_half_disk_quadrature, m2_segment_quadrature

from conftest import BENCH_FLUX, BENCH_IOTA

LINEAR = Nonlinearity()
# Largest energy over the benchmark sweep {1, 10, 50, 200} at h = 1/32, measured once.
SWEEP_ENERGY_BOUND = 9.0266


@pytest.fixture(scope="module")
def sweep(grid32, medium2_32):
    return lambda_sweep(Problem(grid32, medium2_32, LINEAR, BENCH_IOTA, 1.0), [1.0, 10.0, 50.0, 200.0])


def _nonincreasing(values):
    return all(b <= a for a, b in zip(values, values[1:]))


def test_shrinks_oversized_start(grid64):
    m = Medium.constant(grid64, 2.0)
    d = minimize_penalized(grid64, m, LINEAR, PenaltyParams(50.0, BENCH_IOTA), 1.0,
                           init=disk_configuration(grid64, 1.5))
    assert d.J == pytest.approx(BENCH_FLUX, rel=0.05)
    assert d.saturated
    assert abs(d.excess - BENCH_IOTA) <= 2 * grid64.h * d.perimeter
    assert _nonincreasing([row[3] for row in d.trace])


def test_grows_undersized_start(grid32, medium2_32):
    init = disk_configuration(grid32, 0.8)
    d = minimize_penalized(grid32, medium2_32, LINEAR, PenaltyParams(50.0, BENCH_IOTA), 1.0, init=init)
    assert d.excess > volume_excess(grid32, init)
    assert d.saturated


def test_weak_penalty_fills_box(grid16):
    m = Medium.constant(grid16, 2.0)
    d = minimize_penalized(grid16, m, LINEAR, PenaltyParams(1e-3, BENCH_IOTA), 1.0)
    # the outermost cell ring is never occupied
    available = (grid16.nx - 2) * (grid16.ny - 2) - np.count_nonzero(grid16.body_mask)
    assert d.excess >= 0.99 * available * grid16.h ** 2


def test_trace_and_collar(grid32, medium2_32):
    opt = OptimizerConfig(step=16)
    d = minimize_penalized(grid32, medium2_32, LINEAR, PenaltyParams(200.0, BENCH_IOTA), 1.0, opt,
                           init=disk_configuration(grid32, 0.7))
    assert _nonincreasing([row[3] for row in d.trace])
    width = opt.collar_for(grid32)
    assert width == pytest.approx(max(4 * grid32.h, 0.05 * 0.5))
    band = collar(grid32, width) & ~grid32.body_mask
    assert np.all(d.potential.values[band] > 0)
    assert [r["iter"] for r in d.trace_rows()] == [row[0] for row in d.trace]


def test_exhaustive_check_leaves_single_flip_stable(grid16):
    m = Medium.constant(grid16, 2.0)
    d = minimize_penalized(grid16, m, LINEAR, PenaltyParams(50.0, BENCH_IOTA), 1.0,
                           OptimizerConfig(exhaustive_check=True))
    from insulopt.functionals import penalized_objective
    from insulopt.grid import Configuration

    occ = d.config.occupancy
    movable = (occ ^ ndimage.binary_dilation(occ)) | (occ & ~ndimage.binary_erosion(occ))
    movable &= ~collar(grid16, OptimizerConfig().collar_for(grid16)) & ~grid16.body_mask
    movable[[0, -1], :] = movable[:, [0, -1]] = False
    cells = np.argwhere(movable)
    rng = np.random.default_rng(3)
    for i, j in cells[rng.choice(len(cells), size=min(20, len(cells)), replace=False)]:
        trial = occ.copy()
        trial[i, j] = ~trial[i, j]
        ev = penalized_objective(LINEAR, d.params, grid16, m, Configuration(trial), 1.0)
        assert ev.J_lambda >= d.J_lambda - 1e-9


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(max_outer_iter=0)
    with pytest.raises(ValueError):
        OptimizerConfig(step=0)
    with pytest.raises(ValueError):
        OptimizerConfig(move_kind="anneal")


# penalty sweep


def test_sweep_excess_nonincreasing(sweep):
    excess = [r["excess"] for r in sweep.rows]
    assert _nonincreasing(excess)


def test_sweep_weak_penalty_overshoots(sweep):
    assert sweep.rows[0]["excess"] > BENCH_IOTA + 0.5
    assert not sweep.rows[0]["saturated"]


def test_sweep_saturates_above_threshold(sweep):
    assert sweep.lambda0 is not None
    for row in sweep.rows:
        if row["lambda"] >= sweep.lambda0:
            assert row["saturated"]
    assert sweep.table()[-1][0] == 200.0


def test_sweep_energy_bound(grid32, medium2_32, sweep):
    energies = [energy(grid32, medium2_32, d.potential) for d in sweep.designs]
    assert max(energies) == pytest.approx(SWEEP_ENERGY_BOUND, rel=0.10)
    assert all(e <= 1.1 * SWEEP_ENERGY_BOUND for e in energies)


def test_sweep_needs_three_increasing(grid16):
    m = Medium.constant(grid16, 2.0)
    with pytest.raises(ValueError, match="increasing"):
        lambda_sweep(Problem(grid16, m, LINEAR, BENCH_IOTA, 1.0), [1.0, 10.0])
    with pytest.raises(ValueError, match="increasing"):
        lambda_sweep(Problem(grid16, m, LINEAR, BENCH_IOTA, 1.0), [1.0, 10.0, 5.0])


# brute force


def test_single_sector_is_radius_search(grid16):
    m = Medium.constant(grid16, 2.0)
    levels = [0.8, 0.9, 1.0, 1.1, 1.2]
    params = PenaltyParams(50.0, BENCH_IOTA)
    bf = brute_force_minimizer(grid16, m, LINEAR, params, 1.0, 1, levels)
    from insulopt.functionals import penalized_objective
    from insulopt.grid import Configuration

    X, Y = grid16.centers
    rad = np.hypot(X, Y)
    # the star family is rasterized: no sub-cell level set
    rasters = [Configuration((rad <= R) | grid16.body_mask) for R in levels]
    direct = [penalized_objective(LINEAR, params, grid16, m, cfg, 1.0).J_lambda for cfg in rasters]
    assert [v for _, v in bf.evaluations] == pytest.approx(direct, rel=1e-9)
    assert bf.best_levels == (levels[int(np.argmin(direct))],)


def test_symmetric_candidates_solved_once(grid16):
    m = Medium.constant(grid16, 2.0)
    bf = brute_force_minimizer(grid16, m, LINEAR, PenaltyParams(50.0, BENCH_IOTA), 1.0, 4, [0.9, 1.0, 1.1])
    assert len(bf.evaluations) == 81
    assert bf.unique_solves < 81
    assert bf.best_levels == (1.0, 1.0, 1.0, 1.0)


def test_brute_force_worker_count_does_not_matter(grid16):
    m = Medium.constant(grid16, 2.0)
    args = (grid16, m, LINEAR, PenaltyParams(50.0, BENCH_IOTA), 1.0, 3, [0.9, 1.1])
    one = brute_force_minimizer(*args, workers=1)
    two = brute_force_minimizer(*args, workers=2)
    assert one.evaluations == two.evaluations
    assert np.array_equal(one.config.occupancy, two.config.occupancy)


def test_brute_force_budget(grid16):
    m = Medium.constant(grid16, 2.0)
    with pytest.raises(ValueError, match="budget"):
        brute_force_minimizer(grid16, m, LINEAR, PenaltyParams(1.0, 1.0), 1.0, 11, [1.0])
    with pytest.raises(ValueError, match="budget"):
        brute_force_minimizer(grid16, m, LINEAR, PenaltyParams(1.0, 1.0), 1.0, 2, [0.8, 0.9, 1.0, 1.1, 1.2, 1.3])


@pytest.mark.slow
def test_star_family_prefers_constant_radius(grid16):
    # Budget set to the raster area of the radius-1 star, so the penalty does not
    # punish that candidate for rasterization alone.
    from insulopt.grid import Configuration
    from insulopt.optimizer import _sector_masks

    m = Medium.constant(grid16, 2.0)
    levels = np.linspace(0.8, 1.1, 4).tolist()
    star = Configuration(_sector_masks(grid16, 8, [1.0])[:, 0].any(axis=0) | grid16.body_mask)
    params = PenaltyParams(200.0, volume_excess(grid16, star))
    bf = brute_force_minimizer(grid16, m, LINEAR, params, 1.0, 8, levels)
    assert bf.best_levels == (1.0,) * 8
    assert np.array_equal(bf.config.occupancy, star.occupancy)
    # the exchange search finds no improving move from there
    d = minimize_penalized(grid16, m, LINEAR, params, 1.0, init=bf.config)
    assert np.array_equal(d.config.occupancy, bf.config.occupancy)
    assert d.J_lambda == pytest.approx(bf.J_lambda, rel=1e-12)


def test_optimizer_from_brute_force_optimum(grid32, medium2_32):
    # The star family resolves the volume budget only to its radius levels, so the exchange
    # search still trims the rasterization excess; it must never do worse and must stay local.
    params = PenaltyParams(50.0, BENCH_IOTA)
    bf = brute_force_minimizer(grid32, medium2_32, LINEAR, params, 1.0, 1, [0.8, 0.9, 1.0, 1.1])
    d = minimize_penalized(grid32, medium2_32, LINEAR, params, 1.0, init=bf.config)
    assert d.J_lambda <= bf.J_lambda
    occ = bf.config.occupancy
    band = ndimage.binary_dilation(occ & ~ndimage.binary_erosion(occ), iterations=2)
    assert not np.any((d.config.occupancy ^ occ) & ~band)


# inward perturbations


@pytest.fixture(scope="module")
def flat():
    grid = build_grid((-2, 2, -2, 2), 256, 256, DiskBody((0, 0), 0.5))
    return grid, half_plane_configuration(grid, (1.2, 0.0), (1.0, 0.0))


def test_m2_quadratures_agree():
    a, b = m2_half_disk_quadrature(), m2_segment_quadrature()
    assert a == pytest.approx(2.0, abs=1e-3)
    assert b == pytest.approx(2.0, abs=1e-3)
    assert abs(a - b) < 1e-3


def test_zero_amplitude_is_identity(flat):
    grid, cfg = flat
    spec = PerturbationSpec((1.2, 0.0), (1.0, 0.0), 0.25, 0.0)
    assert perturb_inward(grid, cfg, spec) is cfg
    assert energy_differential(grid, Medium.constant(grid, 2.0), cfg, None, spec) == 0.0
    # the guarded limit comes from the boundary integral of the bump
    assert volume_differential(grid, cfg, spec) == pytest.approx(2.0, rel=1e-3)


def test_cells_outside_ball_untouched(flat):
    grid, cfg = flat
    spec = PerturbationSpec((1.2, 0.0), (1.0, 0.0), 0.25, 0.15)
    new = perturb_inward(grid, cfg, spec)
    X, Y = grid.centers
    outside = np.hypot(X - 1.2, Y) >= 0.25
    assert np.array_equal(new.occupancy[outside], cfg.occupancy[outside])
    assert np.array_equal(new.level_set[outside], cfg.level_set[outside])
    assert volume_excess(grid, new) < volume_excess(grid, cfg)


def test_noninjective_amplitude_rejected():
    assert BUMP_MAX_SLOPE == pytest.approx(10 / math.sqrt(3), rel=1e-12)
    with pytest.raises(ValueError, match="injective"):
        PerturbationSpec((1.2, 0.0), (1.0, 0.0), 0.25, 0.18)
    with pytest.raises(ValueError):
        PerturbationSpec((1.2, 0.0), (1.0, 0.0), 0.25, 0.3)


def test_perturbation_ball_must_avoid_body(flat):
    grid, cfg = flat
    with pytest.raises(ValueError, match="body"):
        perturb_inward(grid, cfg, PerturbationSpec((0.7, 0.0), (1.0, 0.0), 0.25, 0.1))


@pytest.mark.parametrize("cells", [8, 16, 32])
def test_volume_differential_flat(flat, cells):
    grid, cfg = flat
    r = cells * grid.h
    for alpha in (0.05, 0.1, 0.15):
        ratio = volume_differential(grid, cfg, PerturbationSpec((1.2, 0.0), (1.0, 0.0), r, alpha))
        limit = volume_differential(grid, cfg, PerturbationSpec((1.2, 0.0), (1.0, 0.0), r, 0.0))
        assert ratio == pytest.approx(2.0, rel=0.10)
        if cells >= 16:
            assert ratio == pytest.approx(limit, rel=0.10)


@pytest.mark.parametrize("theta", [0.5, 1.7])
def test_energy_differential_linear_profile(flat, theta):
    grid, cfg = flat
    m = Medium.constant(grid, 2.0)
    u = solve_potential(grid, m, cfg, 1.0)
    X, _ = grid.centers
    lin = u.with_values(np.where(cfg.occupancy & ~grid.body_mask, np.maximum(theta * (1.2 - X), 0.0), u.values))
    r = 16 * grid.h
    small = energy_differential(grid, m, cfg, lin, PerturbationSpec((1.2, 0.0), (1.0, 0.0), r, 1e-3))
    assert small == pytest.approx(2 * theta ** 2, rel=0.10)
    # the second-order term of the pullback grows linearly with the amplitude
    big = energy_differential(grid, m, cfg, lin, PerturbationSpec((1.2, 0.0), (1.0, 0.0), r, 0.05))
    assert big > small
