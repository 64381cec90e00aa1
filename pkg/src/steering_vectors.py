"""
Steering Vectors & Beamformers
==============================
Ideal-propagation steering vectors, the delay-and-sum filter used to
initialize the extraction algorithms, and the MPDR beamformer whose output
magnitude serves as a non-oracle pilot.

All filters are returned as (K, d) arrays applied as y_k = w_k^H x_k.
"""

from typing import Sequence

import numpy as np
from loguru import logger

import config
from extraction_errors import InvalidGeometry
from mixing_model import coeffs_of
from source_model import PilotSignal


def _direction(azimuth_deg: float, elevation_deg: float = 0.0) -> np.ndarray:
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def steering_vector(mics: np.ndarray, azimuth_deg: float, elevation_deg: float,
                    freqs: np.ndarray, c: float = config.SPEED_OF_SOUND) -> np.ndarray:
    """Far-field plane wave arriving from (azimuth, elevation); phases relative to the array centroid."""
    mics = np.asarray(mics, dtype=float)
    rel = mics - mics.mean(axis=0)
    tau = -(rel @ _direction(azimuth_deg, elevation_deg)) / c       # mics facing the source hear it first
    return np.exp(-2j * np.pi * np.asarray(freqs)[:, None] * tau[None, :])


def point_steering_vector(mics: np.ndarray, point: Sequence[float], freqs: np.ndarray,
                          c: float = config.SPEED_OF_SOUND) -> np.ndarray:
    """Near-field steering toward a position, delays relative to the closest microphone."""
    mics = np.asarray(mics, dtype=float)
    dist = np.linalg.norm(mics - np.asarray(point, dtype=float)[None, :], axis=1)
    if np.any(dist <= 0):
        raise InvalidGeometry("steering point coincides with a microphone")
    tau = (dist - dist.min()) / c
    return np.exp(-2j * np.pi * np.asarray(freqs)[:, None] * tau[None, :])


def delay_and_sum(d: np.ndarray) -> np.ndarray:
    """w_k = d_k / ||d_k||^2, so that w_k^H d_k = 1."""
    norm2 = np.sum(np.abs(d) ** 2, axis=-1, keepdims=True)
    return d / norm2


def mpdr_filter(x, d: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Minimum power distortionless response: R^-1 d / (d^H R^-1 d), R over the whole signal."""
    coeffs = coeffs_of(x)
    n_frames = coeffs.shape[1]
    R = np.einsum("knd,kne->kde", coeffs, coeffs.conj()) / n_frames
    tr = np.real(np.trace(R, axis1=-2, axis2=-1)) / R.shape[-1]
    R = R + (ridge * tr)[:, None, None] * np.eye(R.shape[-1])
    num = np.linalg.solve(R, d[..., None])[..., 0]
    den = np.einsum("kd,kd->k", d.conj(), num)
    return num / den[:, None].conj()


def mpdr_pilot(x, d: np.ndarray, delta: float = config.PILOT_DELTA) -> PilotSignal:
    w = mpdr_filter(x, d)
    y = np.einsum("kd,knd->kn", w.conj(), coeffs_of(x))
    logger.info(f"[PILOT] MPDR pilot over {y.shape[1]} frames")
    return PilotSignal.from_spectrum(y, delta)


def oracle_pilot(soi_spectrum: np.ndarray, delta: float = config.PILOT_DELTA) -> PilotSignal:
    return PilotSignal.from_spectrum(soi_spectrum, delta)
