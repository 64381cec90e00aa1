import numpy as np
import pytest

from extraction_errors import InvalidGeometry
from scene_simulator import linear_array
from steering_vectors import (
    delay_and_sum,
    mpdr_filter,
    mpdr_pilot,
    oracle_pilot,
    point_steering_vector,
    steering_vector,
)

FREQS = np.arange(257) * 16000 / 512


def test_broadside_plane_wave_is_in_phase():
    mics = linear_array([0.0, 0.0, 0.0], 4, 0.05, axis="x")
    d = steering_vector(mics, 90.0, 0.0, FREQS)
    assert d.shape == (257, 4)
    assert np.allclose(d, 1.0)


def test_endfire_delays_follow_spacing():
    mics = linear_array([0.0, 0.0, 0.0], 2, 0.343, axis="x")
    d = steering_vector(mics, 0.0, 0.0, np.array([1000.0]))
    # 1 ms between the two microphones: a full cycle at 1 kHz
    assert np.angle(d[0, 1] / d[0, 0]) == pytest.approx(0.0, abs=1e-9)
    d = steering_vector(mics, 0.0, 0.0, np.array([500.0]))
    assert abs(np.angle(d[0, 1] / d[0, 0])) == pytest.approx(np.pi, abs=1e-9)


def test_point_steering_vector():
    mics = linear_array([1.0, 1.0, 1.0], 3, 0.1)
    d = point_steering_vector(mics, [1.0, 2.0, 1.0], FREQS)
    assert np.allclose(np.abs(d), 1.0)
    # middle microphone is closest
    assert np.allclose(d[:, 1], 1.0)
    with pytest.raises(InvalidGeometry):
        point_steering_vector(mics, mics[0], FREQS)


def test_delay_and_sum_is_distortionless():
    mics = linear_array([1.0, 1.0, 1.0], 4, 0.05)
    d = point_steering_vector(mics, [2.0, 2.0, 1.0], FREQS)
    w = delay_and_sum(d)
    assert np.allclose(np.einsum("kd,kd->k", w.conj(), d), 1.0)


def test_mpdr_is_distortionless_and_nulls_interferer():
    rng = np.random.default_rng(0)
    K, N, d_ch = 4, 4000, 3
    target = np.exp(1j * rng.uniform(0, 2 * np.pi, (K, d_ch)))
    interf = np.exp(1j * rng.uniform(0, 2 * np.pi, (K, d_ch)))
    s = rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N))
    v = 10 * (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N)))
    noise = 0.01 * (rng.standard_normal((K, N, d_ch)) + 1j * rng.standard_normal((K, N, d_ch)))
    x = s[..., None] * target[:, None, :] + v[..., None] * interf[:, None, :] + noise

    w = mpdr_filter(x, target)
    assert np.allclose(np.einsum("kd,kd->k", w.conj(), target), 1.0)
    assert np.all(np.abs(np.einsum("kd,kd->k", w.conj(), interf)) < 0.05)

    pilot = mpdr_pilot(x, target, delta=0.5)
    assert pilot.o.shape == (N,)
    assert pilot.delta == 0.5


def test_oracle_pilot_is_frame_norm_of_soi():
    soi = np.array([[3.0, 0.0], [4.0, 1.0]], dtype=complex)
    assert np.allclose(oracle_pilot(soi).o, [5.0, 1.0])
