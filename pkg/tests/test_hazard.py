import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maintmdp import hazard
from maintmdp.errors import DecompositionError, ValidationError

IM = np.array([0.05, 0.1, 0.2, 0.4, 0.8, 1.6])
LAM = np.array([0.2, 0.08, 0.02, 0.005, 0.001, 0.0001])


@pytest.fixture
def curve():
    return hazard.HazardCurve(IM, LAM)


def test_curve_validation():
    with pytest.raises(ValidationError):
        hazard.HazardCurve([0.1, 0.05], [0.1, 0.2])
    with pytest.raises(ValidationError):
        hazard.HazardCurve([0.1, 0.2], [0.1, 0.2])  # increasing rate
    with pytest.raises(ValidationError):
        hazard.HazardCurve([0.1, 0.2], [0.1, 0.0])
    with pytest.raises(ValidationError):
        hazard.HazardCurve([0.1], [0.1])


def test_csv_round_trip_and_header(tmp_path, curve):
    path = tmp_path / "h.csv"
    curve.to_csv(path)
    back = hazard.HazardCurve.from_csv(path)
    np.testing.assert_array_equal(back.im_grid, curve.im_grid)
    np.testing.assert_array_equal(back.lambda_grid, curve.lambda_grid)
    bad = tmp_path / "bad.csv"
    bad.write_text("0.1,0.2\n0.2,0.1\n")
    with pytest.raises(ValidationError):
        hazard.HazardCurve.from_csv(bad)


def test_annual_event_probability(curve):
    assert hazard.annual_event_probability(curve) == pytest.approx(1 - np.exp(-0.2), rel=1e-15)
    tiny = hazard.HazardCurve([0.1, 1.0], [1e-12, 1e-13])
    assert hazard.annual_event_probability(tiny) == pytest.approx(1e-12, rel=1e-9)


def test_conditional_cdf_values(curve):
    assert hazard.conditional_im_cdf(curve, IM[0]) == 0.0
    assert hazard.conditional_im_cdf(curve, IM[-1]) == pytest.approx(1 - 0.0001 / 0.2)
    # log-log interpolation: geometric midpoint of im maps to geometric midpoint of lambda
    mid = np.sqrt(0.1 * 0.2)
    expected = 1 - np.sqrt(0.08 * 0.02) / 0.2
    assert hazard.conditional_im_cdf(curve, mid) == pytest.approx(expected, rel=1e-13)
    with pytest.raises(ValidationError):
        hazard.conditional_im_cdf(curve, 2.0)


@given(st.floats(0.0, 1.0 - 0.0001 / 0.2 - 1e-9))
def test_inverse_cdf_round_trip(u):
    c = hazard.HazardCurve(IM, LAM)
    im = hazard.inverse_conditional_im_cdf(c, u)
    assert hazard.conditional_im_cdf(c, im) == pytest.approx(u, abs=1e-12)


def test_inverse_tail_maps_to_im_max(curve):
    assert hazard.inverse_conditional_im_cdf(curve, 1.0) == IM[-1]
    assert hazard.inverse_conditional_im_cdf(curve, 0.99999) == IM[-1]
    with pytest.raises(ValidationError):
        hazard.inverse_conditional_im_cdf(curve, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10_000))
def test_discretized_masses_sum_to_one(n_bins):
    pmf = hazard.discretize_annual_im(hazard.HazardCurve(IM, LAM), n_bins)
    assert abs(pmf.masses.sum() - 1.0) <= 1e-12
    assert np.all(pmf.masses >= 0)
    assert pmf.im_points.size == n_bins


def test_discretize_single_bin_and_tail(curve):
    pmf = hazard.discretize_annual_im(curve, 1)
    assert pmf.masses[0] == pytest.approx(1.0)
    assert pmf.im_points[0] == pytest.approx(np.sqrt(IM[0] * IM[-1]))
    pmf = hazard.discretize_annual_im(curve, 5)
    edges = np.exp(np.linspace(np.log(IM[0]), np.log(IM[-1]), 6))
    cdf = hazard.conditional_im_cdf(curve, np.clip(edges, IM[0], IM[-1]))
    # the tail mass beyond im_max is lumped into the last bin
    assert pmf.masses[-1] == pytest.approx(cdf[-1] - cdf[-2] + 0.0001 / 0.2, rel=1e-12)
    np.testing.assert_allclose(pmf.im_points, np.sqrt(edges[:-1] * edges[1:]), rtol=1e-14)


def test_correlation_matrix():
    layout = hazard.SiteLayout([[0, 0], [3, 4], [6, 8]], 10.0)
    R = hazard.build_correlation_matrix(layout)
    assert np.array_equal(R, R.T)
    np.testing.assert_array_equal(np.diag(R), 1.0)
    assert R[0, 1] == pytest.approx(np.exp(-3 * 5 / 10))
    assert R[0, 2] == pytest.approx(np.exp(-3 * 10 / 10))


def test_cholesky_jitter_and_failure():
    # co-located sites give a singular but PSD matrix; the jitter ladder rescues it
    layout = hazard.SiteLayout([[0, 0], [0, 0]], 5.0)
    L = hazard.cholesky_with_jitter(hazard.build_correlation_matrix(layout))
    assert np.all(np.isfinite(L))
    bad = np.array([[1.0, 0.99, -0.99], [0.99, 1.0, 0.99], [-0.99, 0.99, 1.0]])
    with pytest.raises(DecompositionError):
        hazard.cholesky_with_jitter(bad)


def test_correlated_field_marginals_and_correlation(curve):
    layout = hazard.SiteLayout([[0, 0], [2, 0], [30, 0]], 10.0)
    curves = [curve, curve, curve]
    rng = np.random.default_rng(7)
    ims = hazard.sample_correlated_field(layout, curves, rng, size=100_000)
    assert ims.shape == (100_000, 3)
    for x in (0.1, 0.2, 0.4):
        emp = np.mean(ims[:, 0] <= x)
        assert emp == pytest.approx(hazard.conditional_im_cdf(curve, x), abs=0.01)
    z = hazard.latent_normals(layout, np.random.default_rng(8), 100_000)
    R = hazard.build_correlation_matrix(layout)
    np.testing.assert_allclose(np.corrcoef(z.T), R, atol=0.01)


def test_correlated_field_reproducible(curve):
    layout = hazard.SiteLayout([[0, 0], [1, 1]], 8.0)
    a = hazard.sample_correlated_field(layout, [curve, curve], np.random.default_rng(3), size=10)
    b = hazard.sample_correlated_field(layout, [curve, curve], np.random.default_rng(3), size=10)
    assert np.array_equal(a, b)
    single = hazard.sample_correlated_field(layout, [curve, curve], np.random.default_rng(3))
    assert single.shape == (2,)
    with pytest.raises(ValidationError):
        hazard.sample_correlated_field(layout, [curve], np.random.default_rng(3))
