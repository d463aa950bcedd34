import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rssimap.errors import ConfigError, SingularFitError
from rssimap.pathloss import (
    PathLossParams,
    design_matrix,
    fit_pathloss,
    predict_rssi,
    write_pathloss_csv,
)

REF = PathLossParams(p0=-51.88, n=2.89)


def test_reference_distance_gives_p0():
    assert predict_rssi(REF, 1.0) == -51.88
    assert predict_rssi(PathLossParams(-40.0, 3.0, d0=10.0), 10.0) == -40.0


@pytest.mark.parametrize("d, expected", [(100.0, -109.68), (10.0, -80.78)])
def test_table_parameters(d, expected):
    assert predict_rssi(REF, d) == pytest.approx(expected, abs=5e-3)


def test_nonpositive_distance_rejected():
    with pytest.raises(ConfigError):
        predict_rssi(REF, 0.0)
    with pytest.raises(ConfigError):
        predict_rssi(REF, np.array([1.0, -2.0]))


@pytest.mark.parametrize("kw", [{"d0": 0.0}, {"sigma": -1.0}])
def test_invalid_params(kw):
    with pytest.raises(ConfigError):
        PathLossParams(-50.0, 2.0, **kw)


def test_strictly_decreasing():
    d = np.geomspace(1, 5000, 200)
    assert np.all(np.diff(predict_rssi(REF, d)) < 0)


def test_two_point_exact_recovery():
    d = np.array([10.0, 100.0])
    fit = fit_pathloss(d, predict_rssi(REF, d))
    assert fit.p0 == pytest.approx(-51.88, abs=1e-9)
    assert fit.n == pytest.approx(2.89, abs=1e-9)
    assert fit.sigma == 0.0


def test_monte_carlo_recovery():
    rng = np.random.default_rng(11)
    d = rng.uniform(20, 1500, 50_000)
    m = predict_rssi(REF, d) + rng.normal(0, 10.51, d.size)
    fit = fit_pathloss(d, m)
    assert abs(fit.n - 2.89) < 0.05
    assert abs(fit.sigma - 10.51) < 0.3


def test_duplicating_samples_leaves_estimate():
    rng = np.random.default_rng(2)
    d = rng.uniform(5, 500, 300)
    m = predict_rssi(REF, d) + rng.normal(0, 4, d.size)
    a = fit_pathloss(d, m)
    b = fit_pathloss(np.tile(d, 2), np.tile(m, 2))
    assert b.p0 == pytest.approx(a.p0, abs=1e-9)
    assert b.n == pytest.approx(a.n, abs=1e-9)


def test_residuals_orthogonal_to_design():
    rng = np.random.default_rng(4)
    d = rng.uniform(5, 800, 1000)
    m = predict_rssi(REF, d) + rng.normal(0, 8, d.size)
    fit = fit_pathloss(d, m)
    A = design_matrix(d)
    r = m - A @ np.array([fit.p0, fit.n])
    assert np.max(np.abs(A.T @ r)) < 1e-8 * max(1.0, np.abs(A.T @ m).max())


@given(st.floats(-30, 30))
def test_constant_shift(c):
    rng = np.random.default_rng(9)
    d = rng.uniform(5, 800, 200)
    m = predict_rssi(REF, d) + rng.normal(0, 5, d.size)
    a, b = fit_pathloss(d, m), fit_pathloss(d, m + c)
    assert b.p0 == pytest.approx(a.p0 + c, abs=1e-8)
    assert b.n == pytest.approx(a.n, abs=1e-9)
    assert b.sigma == pytest.approx(a.sigma, abs=1e-8)


def test_equal_distances_singular():
    with pytest.raises(SingularFitError):
        fit_pathloss([50, 50, 50], [-90, -91, -92])
    with pytest.raises(SingularFitError):
        fit_pathloss([50], [-90])


def test_sigma_uses_two_parameter_dof():
    d = np.array([1.0, 10.0, 100.0])
    m = np.array([0.0, -20.0, -40.0]) + np.array([1.0, -2.0, 1.0])
    fit = fit_pathloss(d, m)
    A = design_matrix(d)
    eta, *_ = np.linalg.lstsq(A, m, rcond=None)
    r = m - A @ eta
    assert fit.sigma == pytest.approx(np.sqrt(r @ r / 1.0), abs=1e-12)


def test_csv_layout(tmp_path):
    path = tmp_path / "pl.csv"
    write_pathloss_csv(path, [("bs1", PathLossParams(-51.88, 2.89, 10.51), 1234)])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["bs_id", "n", "sigma_db", "p0_dbm", "sample_count"]
    assert rows[1] == ["bs1", "2.8900", "10.5100", "-51.8800", "1234"]
