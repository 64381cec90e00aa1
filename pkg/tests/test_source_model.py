import numpy as np
import pytest
from scipy.stats import kurtosis

import config
from extraction_errors import ConfigError
from source_model import (
    PilotSignal,
    SourceModel,
    aux_nonlinearity,
    frame_norm,
    frame_norms,
    log_pdf,
    sample_vector_laplace,
    score,
)


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def test_score_matches_finite_difference():
    rng = np.random.default_rng(0)
    s = _crandn(rng, 6)
    h = 1e-6
    phi = score(s)
    for k in range(6):
        e = np.zeros(6)
        e[k] = 1.0
        # gradient of -log f = ||s|| : d/dRe + i d/dIm
        d_re = (np.linalg.norm(s + h * e) - np.linalg.norm(s - h * e)) / (2 * h)
        d_im = (np.linalg.norm(s + 1j * h * e) - np.linalg.norm(s - 1j * h * e)) / (2 * h)
        assert abs(phi[k] - (d_re + 1j * d_im)) < 1e-6


def test_score_is_unit_norm_and_log_pdf():
    rng = np.random.default_rng(1)
    s = _crandn(rng, 4, 10)
    assert np.allclose(np.linalg.norm(score(s), axis=0), 1.0)
    assert np.allclose(log_pdf(s), -np.linalg.norm(s, axis=0))


def test_aux_nonlinearity_floor():
    assert aux_nonlinearity(0.0) == pytest.approx(1.0 / config.EPS_R)
    assert aux_nonlinearity(2.0) == pytest.approx(0.5)
    model = SourceModel()
    assert model.aux_nonlinearity(np.array([4.0]))[0] == pytest.approx(0.25)


def test_vector_laplace_radial_mean():
    K, N = 4, 100_000
    s = sample_vector_laplace(K, N, seed=2)
    radius = np.linalg.norm(s, axis=0)
    # Gamma(2K, 1): mean 2K, std sqrt(2K)
    se = np.sqrt(2 * K) / np.sqrt(N)
    assert abs(radius.mean() - 2 * K) < 3 * se


def test_vector_laplace_is_super_gaussian():
    s = sample_vector_laplace(4, 100_000, seed=3)
    assert np.all(kurtosis(s.real, axis=1, fisher=True) > 0.5)


def test_frame_norms_consistent_with_frame_norm():
    rng = np.random.default_rng(4)
    K, N, d = 5, 7, 3
    x = _crandn(rng, K, N, d)
    w = _crandn(rng, K, d)
    pilot = PilotSignal(rng.random(N), delta=0.7)

    r = frame_norms(w, x, pilot)
    for n in range(N):
        assert r[n] == pytest.approx(frame_norm(w, x[:, n], pilot.o[n], pilot.delta))


def test_zero_delta_pilot_reduces_to_unpiloted():
    rng = np.random.default_rng(5)
    x = _crandn(rng, 3, 20, 2)
    w = _crandn(rng, 3, 2)
    piloted = frame_norms(w, x, PilotSignal(rng.random(20) * 10, delta=0.0))
    assert np.array_equal(piloted, frame_norms(w, x))


def test_pilot_validation():
    with pytest.raises(ConfigError):
        PilotSignal(np.ones(5), delta=-1.0)
    with pytest.raises(ConfigError):
        frame_norms(np.ones((2, 2)), np.ones((2, 6, 2)), PilotSignal(np.ones(5)))


def test_pilot_from_spectrum_and_scaling():
    spec = np.zeros((3, 4), dtype=complex)
    spec[0] = [3, 0, 1, 2]
    spec[1] = [4, 0, 0, 0]
    pilot = PilotSignal.from_spectrum(spec, delta=0.5)
    assert np.allclose(pilot.o, [5, 0, 1, 2])

    scaled = pilot.scaled_to(2.0)
    assert np.sqrt(np.mean(scaled.o ** 2)) == pytest.approx(2.0)
    assert scaled.delta == 0.5


if __name__ == "__main__":
    test_score_matches_finite_difference()
    test_vector_laplace_radial_mean()
    print("✅ source model tests passed")
