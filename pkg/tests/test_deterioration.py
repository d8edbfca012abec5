import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maintmdp import deterioration as det
from maintmdp.errors import ValidationError

import oracles

PARAMS = det.calibrate_from_moments(0.4, 0.075, 1.5, 50.0)
SCHEME = det.CdsScheme((0.1, 0.4))


def test_calibration_reproduces_moments():
    assert PARAMS.beta == pytest.approx(0.4 / 0.075**2, rel=1e-14)
    assert PARAMS.a == pytest.approx(0.0804530, rel=1e-6)
    assert PARAMS.mean(50.0) == pytest.approx(0.4, rel=1e-14)
    assert PARAMS.std(50.0) == pytest.approx(0.075, rel=1e-14)


def test_parameter_validation():
    with pytest.raises(ValidationError):
        det.GammaProcessParams(0.0, 1.5, 10.0)
    with pytest.raises(ValidationError):
        det.calibrate_from_moments(0.4, -0.075, 1.5, 50.0)
    with pytest.raises(ValidationError):
        det.CdsScheme((0.4, 0.1))
    with pytest.raises(ValidationError):
        det.shape(PARAMS, -1.0)


def test_classify_boundaries():
    assert SCHEME.classify(0.0) == 1
    assert SCHEME.classify(0.1) == 2
    assert SCHEME.classify(0.399) == 2
    assert SCHEME.classify(0.4) == 3
    np.testing.assert_array_equal(SCHEME.classify([0.05, 0.2, 1.0]), [1, 2, 3])


@pytest.mark.parametrize("tau", [1, 2, 10, 30, 49])
def test_transition_matrix_matches_high_precision_oracle(tau):
    P, fallback = det.transition_matrix(PARAMS, SCHEME, float(tau))
    assert fallback == []
    for l in range(3):
        for m in range(l, 3):
            ref = oracles.cds_transition_entry(PARAMS.a, PARAMS.b, PARAMS.beta, SCHEME.edges, tau, 1.0, l, m)
            assert P[l, m] == pytest.approx(ref, abs=1e-9)


def test_first_step_is_marginal():
    P, fallback = det.transition_matrix(PARAMS, SCHEME, 0.0)
    np.testing.assert_allclose(P[0], det.state_occupancy(PARAMS, SCHEME, 1.0), rtol=0, atol=1e-15)
    assert fallback == [1, 2]


def test_transition_set_structure():
    ts = det.build_transition_set(PARAMS, SCHEME, 50)
    assert ts.matrices.shape == (50, 3, 3)
    np.testing.assert_allclose(ts.matrices.sum(axis=2), 1.0, atol=1e-10)
    assert np.all(np.tril(ts.matrices, -1) == 0)
    assert np.all(ts.matrices >= 0)
    assert all(t == 0 for t, _ in ts.fallback_rows)


def test_chapman_consistency():
    ts = det.build_transition_set(PARAMS, SCHEME, 50)
    occ = det.state_occupancy(PARAMS, SCHEME, 0.0)
    for tau in range(50):
        occ = occ @ ts[tau]
        np.testing.assert_allclose(occ, det.state_occupancy(PARAMS, SCHEME, tau + 1.0), atol=2e-10)


@settings(max_examples=15, deadline=None)
@given(
    st.floats(0.01, 0.2),
    st.floats(0.8, 2.0),
    st.floats(5.0, 120.0),
    st.integers(1, 40),
)
def test_rows_are_stochastic_for_random_parameters(a, b, beta, tau):
    P, _ = det.transition_matrix(det.GammaProcessParams(a, b, beta), SCHEME, float(tau))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(P >= -1e-15)


def test_negligible_occupancy_falls_back_to_identity():
    slow = det.GammaProcessParams(1e-3, 1.0, 1e4)
    with pytest.warns(RuntimeWarning):
        ts = det.build_transition_set(slow, SCHEME, 3)
        det.warn_fallback(ts)
    assert (1, 2) in ts.fallback_rows
    assert ts[1][2, 2] == 1.0


def test_increment_cdf_and_marginal():
    x = 0.05
    alpha = PARAMS.a * (11**1.5 - 10**1.5)
    assert det.increment_cdf(PARAMS, 10.0, 11.0, x) == pytest.approx(
        oracles.gamma_cdf(alpha, PARAMS.beta, x), rel=1e-12)
    assert det.marginal_cdf(PARAMS, 50.0, 0.4) == pytest.approx(
        oracles.gamma_cdf(PARAMS.a * 50**1.5, PARAMS.beta, 0.4), rel=1e-12)
    with pytest.raises(ValidationError):
        det.increment_cdf(PARAMS, 2.0, 1.0, x)


def test_sample_path_moments(rng):
    paths = det.sample_path(PARAMS, 50.0, 1.0, rng, size=100_000)
    assert paths.shape == (100_000, 51)
    assert np.all(np.diff(paths, axis=1) >= 0)
    assert paths[:, 0].max() == 0.0
    assert paths[:, -1].mean() == pytest.approx(0.4, abs=0.003)
    assert paths[:, -1].std() == pytest.approx(0.075, abs=0.003)
    single = det.sample_path(PARAMS, 5.0, 1.0, rng)
    assert single.shape == (6,)
    with pytest.raises(ValidationError):
        det.sample_path(PARAMS, 5.5, 1.0, rng)
