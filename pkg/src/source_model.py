"""
Source Model
============
Vector-Laplace source prior shared by all extraction algorithms, its score
function, the auxiliary nonlinearity and the (optionally piloted) frame norm.

    log f(s)  = -||s||            (up to a constant)
    phi(s)    = s / ||s||         score, Wirtinger convention
    phi(r)    = 1 / max(r, eps_r) auxiliary nonlinearity
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger

import config
from extraction_errors import ConfigError


@dataclass(frozen=True)
class SourceModel:
    kind: str = "vector_laplace"
    eps_r: float = config.EPS_R

    def log_pdf(self, s: np.ndarray) -> np.ndarray:
        return log_pdf(s)

    def score(self, s: np.ndarray) -> np.ndarray:
        return score(s, self.eps_r)

    def aux_nonlinearity(self, r: np.ndarray) -> np.ndarray:
        return aux_nonlinearity(r, self.eps_r)


def log_pdf(s: np.ndarray) -> np.ndarray:
    """Unnormalized log-density of one frame (bins on axis 0)."""
    return -np.linalg.norm(s, axis=0)


def score(s: np.ndarray, eps_r: float = config.EPS_R) -> np.ndarray:
    """phi_k(s) = s_k / ||s||, the norm taken over bins (axis 0)."""
    s = np.asarray(s)
    norm = np.linalg.norm(s, axis=0, keepdims=True)
    return s / np.maximum(norm, eps_r)


def aux_nonlinearity(r, eps_r: float = config.EPS_R):
    return 1.0 / np.maximum(r, eps_r)


def sample_vector_laplace(n_bins: int, n_frames: int, seed=None) -> np.ndarray:
    """
    Draw (K, N) frames from f(s) ~ exp(-||s||) on C^K.

    Direction: normalized circular Gaussian. Radius: Gamma(2K, 1), the radial
    law of exp(-||s||) in 2K real dimensions.
    """
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n_bins, n_frames)) + 1j * rng.standard_normal((n_bins, n_frames))
    g /= np.linalg.norm(g, axis=0, keepdims=True)
    radius = rng.gamma(shape=2 * n_bins, scale=1.0, size=n_frames)
    return g * radius[None, :]


def vector_laplace_bin_variance(n_bins: int) -> float:
    # E[rho^2] / K with rho ~ Gamma(2K, 1)
    return 2.0 * (2 * n_bins + 1)


@dataclass
class PilotSignal:
    """Per-frame pilot magnitudes o_l and their weight delta (o is k-independent)."""
    o: np.ndarray
    delta: float = config.PILOT_DELTA

    def __post_init__(self):
        self.o = np.abs(np.asarray(self.o, dtype=np.float64)).ravel()
        if self.delta < 0:
            raise ConfigError(f"pilot delta must be >= 0, got {self.delta}", field="algorithm.pilot.delta")

    @property
    def n_frames(self) -> int:
        return self.o.shape[0]

    def check_frames(self, n_frames: int) -> None:
        if self.n_frames != n_frames:
            raise ConfigError(
                f"pilot has {self.n_frames} frames, mixture has {n_frames}",
                field="algorithm.pilot",
            )

    def scaled_to(self, target_rms: float) -> "PilotSignal":
        rms = np.sqrt(np.mean(self.o ** 2))
        if rms <= 0:
            logger.warning("[PILOT] pilot is silent, leaving it unscaled")
            return PilotSignal(self.o.copy(), self.delta)
        return PilotSignal(self.o * (target_rms / rms), self.delta)

    @classmethod
    def from_spectrum(cls, spectrum: np.ndarray, delta: float = config.PILOT_DELTA) -> "PilotSignal":
        """o_l = ||S[:, l]|| for a single-channel (K, N) spectrum."""
        spectrum = np.asarray(spectrum)
        if spectrum.ndim == 3:
            spectrum = spectrum[:, :, 0]
        return cls(np.linalg.norm(spectrum, axis=0), delta)

    @classmethod
    def from_text(cls, path: str, delta: float = config.PILOT_DELTA) -> "PilotSignal":
        try:
            values = np.loadtxt(path, ndmin=1)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read pilot file {path}: {exc}", field="algorithm.pilot.path") from exc
        return cls(values, delta)


def frame_norm(w: np.ndarray, x_frame: np.ndarray, pilot_value: Optional[float] = None,
               delta: float = 0.0) -> float:
    """r for one frame: sqrt(sum_k |w_k^H x_k|^2 + delta^2 |o|^2). x_frame is (K, d)."""
    s = np.einsum("kd,kd->k", w.conj(), x_frame)
    r2 = np.sum(np.abs(s) ** 2)
    if pilot_value is not None:
        r2 += delta ** 2 * abs(pilot_value) ** 2
    return float(np.sqrt(r2))


def frame_norms(w: np.ndarray, x: np.ndarray, pilot: Optional[PilotSignal] = None,
                scales: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Vectorized frame_norm over all N frames of x (K, N, d).

    scales: optional (K, N) per-frame divisor applied to w_k^H x before the
    norm (variance-normalized SOI estimate).
    """
    s = np.einsum("kd,knd->kn", w.conj(), x)
    if scales is not None:
        s = s / scales
    r2 = np.sum(np.abs(s) ** 2, axis=0)
    if pilot is not None:
        pilot.check_frames(x.shape[1])
        r2 = r2 + pilot.delta ** 2 * pilot.o ** 2
    return np.sqrt(r2)
