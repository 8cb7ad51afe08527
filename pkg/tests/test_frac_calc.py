"""Tests of the singular quadrature, kernel tables, smoothing, and the
divergence integral.

Frozen expected values were computed with independent oracles:
  * closed-form reductions of the double integral (<1,1>_t = t^{2H},
    <s,s>_1 = 1/(2H+2), <1,s>_1 = 1/2, proved by direct integration);
  * mpmath high-precision quadrature with singularity-aware splitting for
    generic rectangles and for <e^s, e^s>_1 via the incomplete-gamma
    reduction 2H(2H-1) int_0^1 e^{2u} gamma(2H-1, u) du.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsde.fbm import TimeGrid, sample_paths
from fbsde.frac_calc import (build_kernel_table, divergence_integral_deterministic,
                             hat_transform, heat_smooth, inner_product, phi,
                             phi_rect_integral)

H = 0.75

# <e^s, e^s>_1, incomplete-gamma oracle (mpmath, 30 digits)
EXP_INNER_1 = {0.6: 3.1224822156925159, 0.75: 3.0417552506093072,
               0.9: 2.9831111179665424}


# --------------------------------------------------------------------------- #
# kernel
# --------------------------------------------------------------------------- #

def test_phi_values():
    assert phi(1.0, 0.75) == pytest.approx(0.375)
    assert phi(0.25, 0.75) == pytest.approx(0.75)


def test_phi_singularity_and_domain():
    with pytest.raises(ValueError):
        phi(0.0, 0.75)
    with pytest.raises(ValueError):
        phi(np.array([1.0, 0.0]), 0.75)
    with pytest.raises(ValueError):
        phi(1.0, 0.5)


@settings(max_examples=100)
@given(x=st.floats(1e-6, 10.0), h=st.floats(0.51, 0.99))
def test_phi_even_positive(x, h):
    assert phi(-x, h) == phi(x, h)
    assert phi(x, h) > 0.0


def test_rect_integral_against_oracles():
    # two-stage quadrature oracle (exact inner antiderivative validated
    # against 1-D singular quadrature, outer via mpmath)
    got = phi_rect_integral(0.0, 0.5, 0.25, 1.0, (1.0, -0.3), (0.2, 1.1), 0.75)
    assert got == pytest.approx(0.230744842109456729, rel=1e-12)
    # mpmath 2-D quadrature (rectangle touching the diagonal at a corner)
    got = phi_rect_integral(0.1, 0.4, 0.4, 0.9, (0.5, 2.0), (-1.0, 0.7), 0.6)
    assert got == pytest.approx(-0.0291861961710192, rel=1e-12)
    # analytic combination over the full square at H = 0.9
    got = phi_rect_integral(0.0, 1.0, 0.0, 1.0, (1.0, 1.0), (1.0, -1.0), 0.9)
    assert got == pytest.approx(1.0 - 1.0 / 3.8, rel=1e-12)


# --------------------------------------------------------------------------- #
# inner product
# --------------------------------------------------------------------------- #

def test_inner_product_unit_function():
    grid = TimeGrid(1.0, 64)
    ones = np.ones(65)
    for t in (0.25, 0.5, 1.0):
        for h in (0.6, 0.75, 0.9):
            got = inner_product(grid, ones, ones, t, h)
            assert got == pytest.approx(t ** (2 * h), rel=1e-6)


def test_inner_product_closed_forms():
    grid = TimeGrid(1.0, 64)
    s = grid.times
    ones = np.ones_like(s)
    assert inner_product(grid, s, s, 1.0, H) == pytest.approx(1 / 3.5, rel=1e-12)
    assert inner_product(grid, ones, s, 1.0, H) == pytest.approx(0.5, rel=1e-12)
    assert inner_product(grid, 0.0 * s, s, 1.0, H) == 0.0


def test_inner_product_exp_oracle():
    # piecewise-linear sampling of e^s: quadrature is exact for the
    # interpolant, so agreement with the smooth oracle is O(dt^2)
    for h, target in EXP_INNER_1.items():
        grid = TimeGrid(1.0, 256)
        es = np.exp(grid.times)
        assert inner_product(grid, es, es, 1.0, h) == pytest.approx(target, rel=2e-5)


@settings(max_examples=25, deadline=None)
@given(data=st.lists(st.floats(-2.0, 2.0), min_size=9, max_size=9),
       data2=st.lists(st.floats(-2.0, 2.0), min_size=9, max_size=9),
       h=st.floats(0.55, 0.95))
def test_inner_product_symmetric_bilinear(data, data2, h):
    grid = TimeGrid(1.0, 8)
    xi = np.array(data)
    eta = np.array(data2)
    a = inner_product(grid, xi, eta, 1.0, h)
    assert a == pytest.approx(inner_product(grid, eta, xi, 1.0, h), abs=1e-10)
    two = inner_product(grid, 2.0 * xi, eta, 1.0, h)
    assert two == pytest.approx(2.0 * a, abs=1e-10)
    assert inner_product(grid, xi, xi, 1.0, h) >= -1e-10


def test_inner_product_grid_mismatch():
    grid = TimeGrid(1.0, 8)
    with pytest.raises(ValueError):
        inner_product(grid, np.ones(5), np.ones(9), 1.0, H)


# --------------------------------------------------------------------------- #
# kernel table
# --------------------------------------------------------------------------- #

def test_hat_transform_constant():
    grid = TimeGrid(1.0, 64)
    hat = hat_transform(grid, np.ones(65), H)
    t = grid.times
    np.testing.assert_allclose(hat[1:], H * t[1:] ** (2 * H - 1), rtol=1e-6)
    assert hat[0] == 0.0


def test_kernel_table_constant_sigma():
    grid = TimeGrid(1.0, 64)
    tab = build_kernel_table(grid, lambda t: np.ones_like(t), H)
    t = grid.times
    np.testing.assert_allclose(tab.sigma_norm_sq[1:], t[1:] ** (2 * H), rtol=1e-10)
    assert tab.sigma_norm_sq[0] == 0.0
    assert np.all(np.diff(tab.sigma_norm_sq) > 0.0)
    assert np.all(tab.diffusion[1:] > 0.0)
    # constant sigma: sigma_hat/sigma = H t^{2H-1}, so M = 1/H
    assert tab.ratio_bound() == pytest.approx(1.0 / H, rel=1e-9)


def test_kernel_table_scaling():
    grid = TimeGrid(1.0, 32)
    base = build_kernel_table(grid, lambda t: 1.0 + 0.5 * t, H)
    scaled = build_kernel_table(grid, lambda t: 3.0 * (1.0 + 0.5 * t), H)
    np.testing.assert_allclose(scaled.sigma_hat, 3.0 * base.sigma_hat, rtol=1e-12)
    np.testing.assert_allclose(scaled.sigma_norm_sq, 9.0 * base.sigma_norm_sq,
                               rtol=1e-12)


def test_kernel_table_consistency_refines():
    coarse = build_kernel_table(TimeGrid(1.0, 64), lambda t: np.ones_like(t), H)
    fine = build_kernel_table(TimeGrid(1.0, 256), lambda t: np.ones_like(t), H)
    assert coarse.consistency_residual() < 0.02
    assert fine.consistency_residual() < coarse.consistency_residual()


def test_kernel_table_sign_errors():
    grid = TimeGrid(1.0, 16)
    with pytest.raises(ValueError):
        build_kernel_table(grid, lambda t: t - 0.5, H)
    with pytest.raises(ValueError):
        build_kernel_table(grid, lambda t: np.zeros_like(t), H)


def test_kernel_table_csv(tmp_path):
    tab = build_kernel_table(TimeGrid(1.0, 4), lambda t: np.ones_like(t), H)
    out = tmp_path / "kernel.csv"
    tab.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "t,sigma,sigma_hat,sigma_norm_sq,diffusion"
    assert len(lines) == 6


# --------------------------------------------------------------------------- #
# heat smoothing
# --------------------------------------------------------------------------- #

def test_heat_smooth_identity_and_linearity():
    x = np.linspace(-4.0, 4.0, 161)
    dx = x[1] - x[0]
    slice_ = x ** 3 - x
    out = heat_smooth(slice_, dx, 0.0)
    np.testing.assert_array_equal(out, slice_)
    # linear slices are fixed points for any variance
    out = heat_smooth(2.0 * x + 1.0, dx, 0.7)
    np.testing.assert_allclose(out, 2.0 * x + 1.0, atol=1e-12)


def test_heat_smooth_second_moment():
    x = np.linspace(-6.0, 6.0, 481)
    dx = x[1] - x[0]
    v = 0.3
    out = heat_smooth(x ** 2, dx, v)
    # interior nodes only: outside the grid the slice continues linearly
    interior = np.abs(x) <= 6.0 - 8.0 * np.sqrt(v) - 2 * dx
    err = np.abs(out - (x ** 2 + v))[interior]
    # bias of smoothing the piecewise-linear interpolant is dx^2/6
    assert err.max() <= dx ** 2 / 4


def test_heat_smooth_mean_shift():
    x = np.linspace(-4.0, 4.0, 161)
    dx = x[1] - x[0]
    out = heat_smooth(x, dx, 0.5, mean_shift=0.3)
    np.testing.assert_allclose(out, x + 0.3, atol=1e-12)
    out = heat_smooth(x, dx, 0.0, mean_shift=0.3)
    np.testing.assert_allclose(out, x + 0.3, atol=1e-12)


def test_heat_smooth_semigroup():
    x = np.linspace(-6.0, 6.0, 481)
    dx = x[1] - x[0]
    slice_ = np.sin(x)
    a = heat_smooth(heat_smooth(slice_, dx, 0.1), dx, 0.2)
    b = heat_smooth(slice_, dx, 0.3)
    interior = np.abs(x) <= 1.5
    assert np.abs(a - b)[interior].max() <= 5 * dx ** 2


@settings(max_examples=40, deadline=None)
@given(vals1=st.lists(st.floats(-3.0, 3.0), min_size=12, max_size=12),
       bumps=st.lists(st.floats(0.0, 2.0), min_size=8, max_size=8),
       v=st.floats(0.0, 1.0))
def test_heat_smooth_preserves_ordering(vals1, bumps, v):
    # interior bumps keep the end slopes equal, so the linearly extended
    # interpolants are ordered as functions and the smoothing must order too
    lower = np.array(vals1)
    upper = lower.copy()
    upper[2:-2] += np.array(bumps)
    a = heat_smooth(lower, 0.25, v)
    b = heat_smooth(upper, 0.25, v)
    assert np.all(b - a >= -1e-10)


def test_heat_smooth_monotone_slices_stay_monotone():
    x = np.linspace(-4.0, 4.0, 101)
    slice_ = np.tanh(x)
    out = heat_smooth(slice_, x[1] - x[0], 0.4)
    assert np.all(np.diff(out) >= -1e-12)


def test_heat_smooth_negative_variance():
    with pytest.raises(ValueError):
        heat_smooth(np.zeros(8), 0.1, -1e-3)


# --------------------------------------------------------------------------- #
# divergence integral
# --------------------------------------------------------------------------- #

def test_divergence_trivial_cases():
    grid = TimeGrid(1.0, 32)
    batch = sample_paths(grid, H, 100, seed=1)
    zero = divergence_integral_deterministic(grid, np.zeros(33), batch)
    np.testing.assert_array_equal(zero, np.zeros(100))
    one = divergence_integral_deterministic(grid, np.ones(33), batch)
    np.testing.assert_allclose(one, batch.values[:, -1], atol=1e-12)


def test_divergence_moments():
    grid = TimeGrid(1.0, 256)
    n = 10_000
    batch = sample_paths(grid, H, n, seed=17)
    ints = divergence_integral_deterministic(grid, np.ones(257), batch)
    assert abs(ints.mean()) <= 3.0 * ints.std() / np.sqrt(n)
    assert ints.var() == pytest.approx(1.0, abs=0.05)


def test_divergence_grid_mismatch():
    grid = TimeGrid(1.0, 32)
    batch = sample_paths(grid, H, 10, seed=1)
    with pytest.raises(ValueError):
        divergence_integral_deterministic(TimeGrid(1.0, 16), np.ones(17), batch)
    with pytest.raises(ValueError):
        divergence_integral_deterministic(grid, np.ones(10), batch)
