"""
STFT Service
============
Multichannel short-time Fourier analysis / weighted overlap-add synthesis,
plus WAV I/O.

Architecture:
    - Waveform        : (n_samples, n_channels) float64 + sample rate
    - SpectralTensor  : (K bins, N frames, d channels) complex128
    - analyze()       : framing + window + one-sided FFT
    - synthesize()    : inverse FFT + synthesis window + OLA, normalized by the
                        summed squared window

Usage:
    from stft_service import StftConfig, analyze, synthesize, read_wav
    x = analyze(read_wav("mix.wav"), StftConfig())
    y = synthesize(x)
"""

import os
import tempfile
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import soundfile as sf
from loguru import logger
from scipy.signal import get_window

import config
from extraction_errors import ConfigError, SampleRateMismatch, SignalTooShort

# window_id -> scipy name
_SCIPY_WINDOWS = {"hamming": "hamming", "hann": "hann", "rectangular": "boxcar"}


@dataclass(frozen=True)
class StftConfig:
    fft_len: int = config.FFT_LEN
    hop: int = config.HOP
    window_id: str = config.WINDOW

    def validate(self) -> "StftConfig":
        if self.window_id not in _SCIPY_WINDOWS:
            raise ConfigError(f"unknown window '{self.window_id}'", field="stft.window")
        if self.fft_len < 2 or self.fft_len % 2:
            raise ConfigError(f"fft_len must be even and >= 2, got {self.fft_len}", field="stft.fft_len")
        if self.hop < 1 or self.fft_len % self.hop or self.hop > self.fft_len // 2:
            raise ConfigError(
                f"hop {self.hop} must divide fft_len {self.fft_len} and be <= fft_len/2",
                field="stft.hop",
            )
        return self

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    def window(self) -> np.ndarray:
        # periodic window (fftbins=True) so the squared-window sum is flat
        return get_window(_SCIPY_WINDOWS[self.window_id], self.fft_len, fftbins=True)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2:
            raise ValueError(f"waveform must be 1-D or 2-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = samples

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def channel(self, i: int) -> "Waveform":
        return Waveform(self.samples[:, i:i + 1].copy(), self.sample_rate)


@dataclass
class SpectralTensor:
    coeffs: np.ndarray          # (K, N, d)
    fft_len: int
    hop: int
    window_id: str = config.WINDOW
    sample_rate: int = config.SAMPLE_RATE
    n_samples: Optional[int] = None     # original signal length, restored by synthesize()

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim == 2:
            coeffs = coeffs[:, :, None]
        if coeffs.ndim != 3:
            raise ValueError(f"coeffs must be (K, N, d), got shape {coeffs.shape}")
        if coeffs.shape[0] != self.fft_len // 2 + 1:
            raise ValueError(f"K={coeffs.shape[0]} does not match fft_len={self.fft_len}")
        self.coeffs = coeffs

    @property
    def n_bins(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_channels(self) -> int:
        return self.coeffs.shape[2]

    @property
    def stft_config(self) -> StftConfig:
        return StftConfig(self.fft_len, self.hop, self.window_id)

    @property
    def can_synthesize(self) -> bool:
        try:
            self.stft_config.validate()
            return True
        except ConfigError:
            return False

    def freqs(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / max(self.fft_len, 1)

    def with_coeffs(self, coeffs: np.ndarray) -> "SpectralTensor":
        return replace(self, coeffs=coeffs)


def n_frames_for(n_samples: int, cfg: StftConfig) -> int:
    return (n_samples - cfg.fft_len) // cfg.hop + 1


def analyze(wave: Waveform, cfg: StftConfig = StftConfig()) -> SpectralTensor:
    """Framing, analysis window and one-sided FFT of every channel."""
    cfg.validate()
    n = wave.n_samples
    if n < cfg.fft_len:
        raise SignalTooShort(f"signal has {n} samples, fft_len is {cfg.fft_len}")

    n_frames = n_frames_for(n, cfg)
    idx = np.arange(cfg.fft_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = wave.samples[idx] * cfg.window()[None, :, None]    # (N, L, d)
    spec = np.fft.rfft(frames, axis=1)                           # (N, K, d)

    logger.debug(f"[STFT] analyze: {n} samples x {wave.n_channels} ch -> {n_frames} frames")
    return SpectralTensor(
        coeffs=spec.transpose(1, 0, 2),
        fft_len=cfg.fft_len,
        hop=cfg.hop,
        window_id=cfg.window_id,
        sample_rate=wave.sample_rate,
        n_samples=n,
    )


def synthesize(x: SpectralTensor) -> Waveform:
    """
    Inverse of analyze(): weighted overlap-add with the analysis window reused
    as synthesis window, normalized by the summed squared window.

    Samples where the squared-window sum vanishes are set to zero. When
    x.n_samples is known, the output is zero-padded (or cut) to that length.
    """
    cfg = x.stft_config.validate()
    win = cfg.window()
    n_frames = x.n_frames
    d = x.n_channels

    frames = np.fft.irfft(x.coeffs.transpose(1, 0, 2), n=cfg.fft_len, axis=1)
    frames = frames * win[None, :, None]                         # (N, L, d)

    length = (n_frames - 1) * cfg.hop + cfg.fft_len
    out = np.zeros((length, d))
    norm = np.zeros(length)
    # hop divides fft_len: add each hop-sized slice of every frame in one shot
    win2 = win ** 2
    for r in range(cfg.fft_len // cfg.hop):
        sl = slice(r * cfg.hop, (r + 1) * cfg.hop)
        start = r * cfg.hop
        stop = start + n_frames * cfg.hop
        out[start:stop] += frames[:, sl, :].reshape(n_frames * cfg.hop, d)
        norm[start:stop] += np.tile(win2[sl], n_frames)

    floor = 1e-10 * norm.max()
    valid = norm > floor
    out[valid] /= norm[valid, None]
    out[~valid] = 0.0

    if x.n_samples is not None:
        if x.n_samples > length:
            out = np.vstack([out, np.zeros((x.n_samples - length, d))])
        else:
            out = out[:x.n_samples]
    return Waveform(out, x.sample_rate)


# ----------------------------------------------------------------------
# WAV I/O
# ----------------------------------------------------------------------

def read_wav(path: str, expected_rate: Optional[int] = None, field: Optional[str] = None) -> Waveform:
    """Read a WAV file as float64 (n, d); `field` names the config entry in errors."""
    if not os.path.isfile(path):
        raise ConfigError(f"no such audio file: {path}", field=field)
    try:
        samples, rate = sf.read(path, always_2d=True, dtype="float64")
    except (sf.SoundFileError, RuntimeError) as exc:
        raise ConfigError(f"cannot read audio file {path}: {exc}", field=field) from exc
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateMismatch(f"{path}: {rate} Hz, expected {expected_rate} Hz")
    logger.debug(f"[STFT] read {path}: {samples.shape[0]} samples, {samples.shape[1]} ch @ {rate} Hz")
    return Waveform(samples, rate)


def write_wav(path: str, wave: Waveform, subtype: str = "FLOAT") -> str:
    """Atomic write (temp file in the target directory, then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(suffix=".wav", dir=directory)
    os.close(fd)
    try:
        sf.write(tmp, wave.samples, wave.sample_rate, subtype=subtype)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path
