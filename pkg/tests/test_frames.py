import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from akfhdr.frames import (IRRADIANCE_SCALE, WEIGHT_FLOOR, CrfFitError, CrfTable,
                           FrameNoiseParams, FrameObservation, biased_log, fit_crf,
                           frame_covariance, interpolate_covariance, to_log_frame, weighting_at)

SCENE = np.geomspace(1e-3, 1.0, 20000).reshape(100, 200)
# exposure ratios avoid powers of two, which alias with power-law responses
EXPOSURES = (0.3, 0.7, 1.3, 3.1, 7.0)


def exposure_stack(crf_fn, exposures=EXPOSURES):
    return [(t, np.round(255 * crf_fn(np.clip(SCENE * t, 0, 1))).astype(np.uint8))
            for t in exposures]


def square_crf():
    return CrfTable.from_function(lambda i: i ** 2)


# -- tables and weights ------------------------------------------------------------------

def test_identity_weight_is_one_inside():
    crf = CrfTable.linear()
    y = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(weighting_at(crf, y), 1.0, atol=1e-12)


def test_square_crf_weight_matches_finite_difference():
    crf = square_crf()
    # oracle: slope of I^2 at its inverse, normalised by the largest interior slope
    y = np.linspace(0, 1, 256)
    slope = 2 * np.sqrt(y)
    oracle = slope / slope[1:-1].max()
    assert weighting_at(crf, 0.25) == pytest.approx(np.interp(0.25, y, oracle), abs=1e-3)
    assert weighting_at(crf, 0.25) == pytest.approx(0.5, abs=0.01)


def test_weight_at_saturation_endpoint_is_floor():
    crf = CrfTable.linear()
    assert weighting_at(crf, 1.0) == WEIGHT_FLOOR
    assert weighting_at(crf, 0.0) == WEIGHT_FLOOR


def test_out_of_domain_response_clamped(caplog):
    crf = CrfTable.linear()
    assert weighting_at(crf, 1.5) == weighting_at(crf, 1.0)
    assert "clamped" in caplog.text


def test_weights_in_unit_interval():
    for crf in (CrfTable.linear(), square_crf(), CrfTable.from_function(lambda i: i ** 0.45)):
        assert np.all(crf.weight > 0) and np.all(crf.weight <= 1)
        assert crf.weight[1:-1].max() == pytest.approx(1.0)


def test_round_trip_on_monotone_interior():
    # below ~0.1 the square law is too flat for a 256-sample inverse table
    for fn in (lambda i: i, lambda i: i ** 2, lambda i: i ** (1 / 2.2)):
        crf = CrfTable.from_function(fn)
        irr = np.linspace(0.1, 0.95, 86)
        back = crf.inverse_response(crf.response_of_irradiance(irr))
        assert np.max(np.abs(back - irr)) < 1 / 255


def test_clipped_plateaus_read_as_clip_points():
    crf = CrfTable.linear().clipped(100 / 255, 160 / 255)
    assert crf.inverse_response(0.0) == pytest.approx(100 / 255, abs=1e-9)
    assert crf.inverse_response(1.0) == pytest.approx(160 / 255, abs=1e-9)
    assert weighting_at(crf, 100 / 255) == WEIGHT_FLOOR
    assert weighting_at(crf, 160 / 255) == WEIGHT_FLOOR
    assert weighting_at(crf, 130 / 255) == pytest.approx(1.0)


# -- covariance ----------------------------------------------------------------------------

def constant_weight_table(w, r_max=None):
    grid = np.linspace(0, 1, 256)
    return CrfTable(grid, grid, np.full(256, w), r_max=r_max)


def test_frame_covariance_examples():
    p = FrameNoiseParams(sigma2_im=1.0)
    assert frame_covariance(constant_weight_table(0.5), 0.5, p) == pytest.approx(2.0)
    assert frame_covariance(constant_weight_table(1.0), 0.5, p) == pytest.approx(1.0)
    assert frame_covariance(constant_weight_table(WEIGHT_FLOOR, r_max=100.0), 0.5, p) == 100.0


def test_default_cap():
    crf = CrfTable.linear()
    p = FrameNoiseParams(sigma2_im=2.0)
    assert frame_covariance(crf, 1.0, p) == pytest.approx(2.0 / WEIGHT_FLOOR)


def test_covariance_non_increasing_in_weight():
    p = FrameNoiseParams()
    w = np.linspace(0.001, 1, 200)
    r = [float(frame_covariance(constant_weight_table(v), 0.5, p)) for v in w]
    assert np.all(np.diff(r) <= 0)


def test_saturated_response_has_extreme_covariance():
    crf = CrfTable.linear()
    p = FrameNoiseParams()
    raw = np.tile(np.arange(100, 256, dtype=np.uint8), (4, 1))
    lf = to_log_frame(FrameObservation(0.5, 0.01, raw), crf, p)
    col = int(np.argmax(lf.covariance[0]))
    assert raw[0, col] == 255
    irr = IRRADIANCE_SCALE * 1.0
    assert lf.covariance[0, col] == pytest.approx(crf.covariance_cap(p) / (irr + 1.0) ** 2)


def test_interpolate_covariance_examples():
    assert interpolate_covariance(1.0, 3.0, 0.0, 1.0, 0.0) == 1.0
    assert interpolate_covariance(1.0, 3.0, 0.0, 1.0, 0.5) == pytest.approx(2.0)
    assert interpolate_covariance(1.0, 3.0, 0.0, 1.0, 0.25) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        interpolate_covariance(1.0, 3.0, 0.0, 1.0, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 100), st.floats(1e-6, 100), st.floats(0, 1))
def test_interpolated_covariance_between_endpoints(r0, r1, a):
    r = interpolate_covariance(r0, r1, 2.0, 3.0, 2.0 + a)
    assert min(r0, r1) - 1e-12 <= r <= max(r0, r1) + 1e-12


# -- log frames ----------------------------------------------------------------------------

def test_biased_log_direct_substitution():
    lf, r = biased_log(0.0, 0.04, 1.0)
    assert lf == pytest.approx(-0.02)
    assert r == pytest.approx(0.04)


def test_well_exposed_log_close_to_plain_log():
    crf = CrfTable.linear()
    raw = np.full((2, 2), 128, dtype=np.uint8)
    lf = to_log_frame(FrameObservation(0.5, 0.01, raw), crf, FrameNoiseParams())
    i = IRRADIANCE_SCALE * 128 / 255
    np.testing.assert_allclose(lf.log_intensity, np.log(i + 1.0), atol=1e-3)
    assert np.all(lf.covariance > 0)


def test_log_frame_monotone_on_linear_crf():
    crf = CrfTable.linear()
    raw = np.arange(1, 255, dtype=np.uint8)[None, :]
    lf = to_log_frame(FrameObservation(0.5, 0.01, raw), crf, FrameNoiseParams())
    assert np.all(np.diff(lf.log_intensity[0]) > 0)


def test_frame_observation_checks():
    with pytest.raises(ValueError):
        FrameObservation(0.001, 0.01, np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        FrameObservation(0.5, 0.0, np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        FrameObservation(0.5, 0.01, np.full((2, 2), 1.5)).normalized()


# -- CRF fitting -----------------------------------------------------------------------------

def test_fit_linear_stack():
    crf = fit_crf(exposure_stack(lambda i: i))
    irr = np.linspace(0.02, 0.98, 49)
    assert np.max(np.abs(crf.response_of_irradiance(irr) - irr)) < 0.02
    np.testing.assert_allclose(crf.weight[5:251], 1.0, atol=0.05)


def test_fit_square_stack_weight():
    crf = fit_crf(exposure_stack(lambda i: i ** 2))
    assert weighting_at(crf, 0.25) == pytest.approx(0.5, abs=0.03)
    # 8-bit quantisation ripples the fitted inverse, so only the coarse shape is checked
    y = np.linspace(0.1, 0.9, 9)
    np.testing.assert_allclose(weighting_at(crf, y), np.sqrt(y), atol=0.12)


def test_fit_single_exposure_fails():
    with pytest.raises(CrfFitError):
        fit_crf(exposure_stack(lambda i: i, exposures=(1.0,)))


def test_fit_reports_uncovered_codes():
    stack = [(t, np.round(255 * np.clip(0.5 * np.ones((10, 10)) * t, 0, 1)).astype(np.uint8))
             for t in (0.3, 0.5, 1.9)]
    with pytest.raises(CrfFitError, match="uncovered"):
        fit_crf(stack)


def test_fitted_table_is_monotone():
    crf = fit_crf(exposure_stack(lambda i: i ** (1 / 2.2)))
    assert np.all(np.diff(crf.response) >= 0)
    assert np.all(np.diff(crf.irradiance) >= 0)
