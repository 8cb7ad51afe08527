"""Tests of the exact fBm samplers and the covariance oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsde.fbm import (CHOLESKY_MAX_STEPS, PathBatch, TimeGrid, covariance,
                       covariance_matrix, decimate, sample_paths)

H_DEFAULT = 0.75


# --------------------------------------------------------------------------- #
# grids
# --------------------------------------------------------------------------- #

def test_time_grid_basics():
    g = TimeGrid(1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_allclose(g.times, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert g.index_of(0.75) == 3
    with pytest.raises(ValueError):
        g.index_of(0.3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_decimate_restricts_nodes():
    g = TimeGrid(1.0, 8)
    batch = sample_paths(g, H_DEFAULT, 3, seed=1)
    coarse = decimate(batch, 4)
    assert coarse.grid.n_steps == 2
    np.testing.assert_array_equal(coarse.values, batch.values[:, ::4])
    with pytest.raises(ValueError):
        decimate(batch, 3)


# --------------------------------------------------------------------------- #
# covariance
# --------------------------------------------------------------------------- #

def test_covariance_examples():
    assert covariance(1.0, 1.0, 0.75) == pytest.approx(1.0)
    assert covariance(2.3, 0.0, 0.6) == 0.0
    # s = 0.5 term cancels against |t-s| when t = 1
    assert covariance(1.0, 0.5, 0.75) == pytest.approx(0.5)


def test_covariance_domain_errors():
    with pytest.raises(ValueError):
        covariance(1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        covariance(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        covariance(-1.0, 1.0, 0.75)


@settings(max_examples=100)
@given(t=st.floats(0.0, 10.0), s=st.floats(0.0, 10.0),
       h=st.floats(0.51, 0.99))
def test_covariance_symmetric_nonnegative(t, s, h):
    a = covariance(t, s, h)
    assert a == covariance(s, t, h)
    assert a >= -1e-12


@settings(max_examples=60)
@given(pts=st.lists(st.floats(0.01, 5.0), min_size=4, max_size=4,
                    unique=True),
       h=st.floats(0.55, 0.95))
def test_disjoint_increments_positively_correlated(pts, h):
    a, b, c, d = sorted(pts)
    cov = (covariance(b, d, h) - covariance(b, c, h)
           - covariance(a, d, h) + covariance(a, c, h))
    assert cov > 0.0


def test_covariance_matrix_entries():
    g = TimeGrid(1.0, 2)
    m = covariance_matrix(g, 0.75)
    # diagonal = t^{2H}, off-diagonal (0.5, 1) entry from the closed form
    np.testing.assert_allclose(np.diag(m), g.times ** 1.5)
    assert m[1, 2] == pytest.approx(0.5)
    # 1-node grid: 1x1 matrix [1.0] after dropping t=0
    one = covariance_matrix(TimeGrid(1.0, 1), 0.75)[1:, 1:]
    np.testing.assert_allclose(one, [[1.0]])


def test_covariance_matrix_factorizable():
    for h in (0.6, 0.75, 0.9):
        m = covariance_matrix(TimeGrid(1.0, 64), h)[1:, 1:]
        np.linalg.cholesky(m)  # raises on failure


# --------------------------------------------------------------------------- #
# sampling
# --------------------------------------------------------------------------- #

def test_sampling_determinism_and_start():
    g = TimeGrid(1.0, 32)
    a = sample_paths(g, H_DEFAULT, 50, seed=123)
    b = sample_paths(g, H_DEFAULT, 50, seed=123)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(a.values[:, 0] == 0.0)
    c = sample_paths(g, H_DEFAULT, 50, seed=124)
    assert not np.array_equal(a.values, c.values)


def test_normal_streams_keyed_per_path():
    # the Gaussian draws of path p depend on (seed, p) only, so enlarging
    # the ensemble or reordering path generation cannot change them
    from fbsde.fbm import _path_normals

    a = _path_normals(7, 10, 16)
    b = _path_normals(7, 25, 16)
    np.testing.assert_array_equal(a, b[:, :10])


def test_terminal_moments():
    g = TimeGrid(1.0, 64)
    n = 10_000
    batch = sample_paths(g, H_DEFAULT, n, seed=42)
    term = batch.values[:, -1]
    # 3-standard-error bound on the mean, known std = t_end^H
    assert abs(term.mean()) <= 3.0 * 1.0 / np.sqrt(n)
    assert term.var() == pytest.approx(1.0, abs=0.05)


def _covariance_pass_fraction(batch):
    v = batch.values[:, 1:]
    emp = v.T @ v / batch.n_paths
    theo = covariance_matrix(batch.grid, batch.hurst)[1:, 1:]
    se = np.sqrt((np.outer(np.diag(emp), np.diag(emp)) + emp ** 2) / batch.n_paths)
    return float(np.mean(np.abs(emp - theo) <= 3.0 * se))


@pytest.mark.parametrize("method", ["cholesky", "circulant"])
def test_empirical_covariance_matches(method):
    g = TimeGrid(1.0, 48)
    batch = sample_paths(g, H_DEFAULT, 10_000, seed=9, method=method)
    assert batch.method == method
    assert _covariance_pass_fraction(batch) >= 0.99


def test_method_auto_threshold():
    small = sample_paths(TimeGrid(1.0, 8), H_DEFAULT, 2, seed=0)
    assert small.method == "cholesky"
    big = sample_paths(TimeGrid(1.0, CHOLESKY_MAX_STEPS * 2), H_DEFAULT, 1, seed=0)
    assert big.method == "circulant"


def test_circulant_spectrum_positive():
    from fbsde.fbm import _circulant_sqrt_eigs

    for h in (0.55, 0.75, 0.95):
        eigs = _circulant_sqrt_eigs(TimeGrid(1.0, 256), h)
        assert np.all(eigs >= 0.0)


def test_sampling_input_validation():
    g = TimeGrid(1.0, 8)
    with pytest.raises(ValueError):
        sample_paths(g, 0.4, 5, seed=0)
    with pytest.raises(ValueError):
        sample_paths(g, H_DEFAULT, 0, seed=0)
    with pytest.raises(ValueError):
        sample_paths(g, H_DEFAULT, 5, seed=0, method="wavelet")


def test_batch_immutable():
    batch = sample_paths(TimeGrid(1.0, 8), H_DEFAULT, 2, seed=0)
    with pytest.raises(ValueError):
        batch.values[0, 0] = 1.0


def test_csv_export_format(tmp_path):
    batch = sample_paths(TimeGrid(0.5, 4), 0.6, 2, seed=5)
    out = tmp_path / "paths.csv"
    batch.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == f"# hurst={0.6!r} seed=5 dt={0.125!r}"
    assert lines[1].split(",")[0] == "0.0"
    assert len(lines) == 2 + 2
    row = [float(v) for v in lines[2].split(",")]
    np.testing.assert_array_equal(row, batch.values[0])
