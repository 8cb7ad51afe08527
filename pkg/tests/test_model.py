"""Tests of model specification, validation, the forward process, and the
model file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsde.fbm import TimeGrid, sample_paths
from fbsde.model import (CoefficientSet, DelaySpec, DriverSpec, FuncSpec, ModelSpec,
                         TerminalData, constant, eta_marginal, eta_paths, linear,
                         parse_model, serialize_model, validate)

H = 0.75


def make_model(driver=None, g=None, h=None, K=0.0, delta=0.0, zeta=0.0, T=1.0,
               b=None, sigma=None, L=1.0, deg=2, eta0=0.0):
    return ModelSpec(
        CoefficientSet(eta0, b or constant(0.0), sigma or constant(1.0), H),
        DelaySpec(constant(delta), constant(zeta), K, L),
        driver or DriverSpec("zero", (), 0.0),
        TerminalData(g or linear(0.0, 1.0), h or constant(1.0), deg),
        T)


# --------------------------------------------------------------------------- #
# registry functions
# --------------------------------------------------------------------------- #

def test_funcspec_evaluation():
    assert FuncSpec("constant", (2.5,))(0.3) == 2.5
    assert FuncSpec("linear", (1.0, 2.0))(0.5) == 2.0
    assert FuncSpec("poly", (1.0, 0.0, 3.0))(2.0) == 13.0
    assert FuncSpec("exp", (2.0, 1.0))(0.0) == 2.0
    assert FuncSpec("sin", (1.0, np.pi))(0.5) == pytest.approx(1.0)
    arr = FuncSpec("linear", (0.0, 1.0))(np.array([1.0, 2.0]))
    np.testing.assert_array_equal(arr, [1.0, 2.0])


def test_funcspec_errors():
    with pytest.raises(ValueError):
        FuncSpec("sqrt", (1.0,))
    with pytest.raises(ValueError):
        FuncSpec("linear", (1.0,))


@settings(max_examples=60)
@given(name=st.sampled_from(["constant", "linear", "exp", "sin"]),
       params=st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=2))
def test_funcspec_roundtrip(name, params):
    if name == "constant":
        params = params[:1]
    spec = FuncSpec(name, tuple(params))
    assert FuncSpec.parse(spec.serialize()) == spec


def test_driver_linear_and_f0():
    f = DriverSpec("linear", (1.0, 0.5, 2.0, -1.0, 3.0, 0.25), 6.25)
    assert f(0.0, 1.0, 1.0, 1.0, 1.0, 1.0) == pytest.approx(1 + 0.5 + 2 - 1 + 3 + 0.25)
    assert f.f0(0.0, 2.0) == pytest.approx(2.0)
    assert f.uses_anticipated_y and f.uses_anticipated_z
    g = DriverSpec("linear", (0.0, 0.0, 1.0, 0.0, 0.0, 0.0), 1.0)
    assert not g.uses_anticipated_y and not g.uses_anticipated_z
    assert DriverSpec("zero", (), 0.0)(0, 1.0, 2.0, 3.0, 4.0, 5.0) == 0.0


# --------------------------------------------------------------------------- #
# validation
# --------------------------------------------------------------------------- #

def test_validate_constant_delay_passes():
    model = make_model(K=0.25, delta=0.25, zeta=0.1)
    report = validate(model, TimeGrid(1.25, 125))
    assert report.passed, str(report)


def test_validate_condition_i_fails_for_large_delay():
    model = make_model(K=0.0, delta=1.0)
    report = validate(model, TimeGrid(1.0, 100))
    names = {c.name for c in report.failures()}
    assert "condition_i_delta" in names


def test_validate_sigma_sign_change_fails():
    model = make_model(sigma=linear(-0.5, 1.0))
    report = validate(model, TimeGrid(1.0, 50))
    assert any(c.name == "sigma_sign" for c in report.failures())


def test_validate_lipschitz_linear_driver():
    f = DriverSpec("linear", (0.3, 0.0, 1.0, -1.0, 0.5, 0.0), 1.0)
    model = make_model(driver=f)
    report = validate(model, TimeGrid(1.0, 50))
    assert report.passed, str(report)
    # understated constant must fail the spot check
    f_bad = DriverSpec("linear", (0.0, 0.0, 1.0, 0.0, 0.0, 0.0), 0.25)
    report = validate(make_model(driver=f_bad), TimeGrid(1.0, 50))
    assert any(c.name == "lipschitz" for c in report.failures())


def test_validate_deterministic():
    model = make_model(K=0.25, delta=0.25)
    g = TimeGrid(1.25, 125)
    assert str(validate(model, g)) == str(validate(model, g))


# --------------------------------------------------------------------------- #
# forward process
# --------------------------------------------------------------------------- #

def test_eta_paths_reduces_to_fbm():
    model = make_model(eta0=0.7)
    batch = sample_paths(TimeGrid(1.0, 32), H, 20, seed=2)
    eta = eta_paths(model, batch)
    np.testing.assert_allclose(eta, 0.7 + batch.values, atol=1e-12)


def test_eta_paths_moments():
    model = make_model(b=constant(1.0), eta0=0.2)
    n = 10_000
    batch = sample_paths(TimeGrid(1.0, 64), H, n, seed=3)
    eta = eta_paths(model, batch)
    term = eta[:, -1]
    se = term.std() / np.sqrt(n)
    assert abs(term.mean() - 1.2) <= 3 * se
    assert term.var() == pytest.approx(1.0, rel=0.05)


def test_eta_paths_hurst_mismatch():
    model = make_model()
    batch = sample_paths(TimeGrid(1.0, 16), 0.6, 5, seed=1)
    with pytest.raises(ValueError):
        eta_paths(model, batch)


def test_eta_marginal_values():
    grid = TimeGrid(1.0, 64)
    model = make_model(eta0=0.4)
    table = model.kernel_table(grid)
    assert eta_marginal(model, table, 0.0) == (0.4, 0.0)
    mean, var = eta_marginal(model, table, 0.5)
    assert mean == 0.4
    assert var == pytest.approx(0.5 ** 1.5, rel=1e-9)
    drifted = make_model(b=constant(1.0))
    table_d = drifted.kernel_table(grid)
    mean, _ = eta_marginal(drifted, table_d, 1.0)
    assert mean == pytest.approx(1.0)
    with pytest.raises(ValueError):
        eta_marginal(model, table, 2.0)


# --------------------------------------------------------------------------- #
# model files
# --------------------------------------------------------------------------- #

def test_model_file_roundtrip():
    model = make_model(
        driver=DriverSpec("linear", (0.1, 0.0, -1.0, 0.0, 0.5, 0.0), 1.0),
        g=FuncSpec("poly", (0.0, 0.0, 1.0)), K=0.25, delta=0.25,
        b=linear(0.1, -0.2), sigma=linear(1.0, 0.5), eta0=0.3)
    text = serialize_model(model)
    assert parse_model(text) == model
    # canonical form is a fixed point of parse . serialize
    assert serialize_model(parse_model(text)) == text


@settings(max_examples=40)
@given(eta0=st.floats(-10, 10, allow_nan=False),
       c=st.floats(0.1, 5.0),
       k=st.floats(0.0, 1.0),
       t=st.floats(0.5, 3.0),
       lip=st.floats(0.0, 4.0))
def test_model_file_roundtrip_random(eta0, c, k, t, lip):
    model = make_model(driver=DriverSpec("linear", (c, 0.0, lip, 0.0, 0.0, 0.0), lip),
                       K=k, T=t, eta0=eta0, sigma=constant(c))
    assert parse_model(serialize_model(model)) == model


def test_model_file_errors():
    with pytest.raises(ValueError):
        parse_model("[coefficients]\neta0 = 1\n")   # missing sections
    with pytest.raises(ValueError):
        parse_model("junk line\n")
