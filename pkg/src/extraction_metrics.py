"""
Extraction Metrics
==================
Objective evaluation of an extracted SOI against ground-truth images.

    - iSINR : SINR after filtering minus SINR at the reference microphone,
              measured block-wise then averaged (whole-signal value kept too)
    - iSDR  : SDR of the output minus SDR of the reference microphone, with a
              global delay search and scale-invariant projection
    - attenuation map : output/input power of the final filter for a white
              noise source placed at each point of a grid

All values in dB, capped at +-METRIC_CAP_DB.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger
from scipy.signal import correlate, correlation_lags, fftconvolve

import config
from extraction_engine import apply_filter, rescale_output
from extraction_errors import UndefinedMetric
from mixing_model import ExtractionState, block_bounds
from scene_simulator import GroundTruth, RoomSpec, SyntheticMixture, room_rirs
from stft_service import StftConfig, Waveform, analyze, synthesize


@dataclass
class MetricReport:
    algorithm: str
    isinr_db: float
    isinr_global_db: float
    isdr_db: float
    fail: bool
    seed: Optional[int] = None
    wall_time: float = 0.0
    block_isinr_db: List[float] = field(default_factory=list)
    capped: List[str] = field(default_factory=list)

    def to_row(self) -> dict:
        row = asdict(self)
        row.pop("block_isinr_db")
        row["capped"] = ";".join(self.capped)
        row["wall_time_s"] = row.pop("wall_time")
        return row


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.abs(x) ** 2))


def _ratio_db(num: float, den: float) -> float:
    if num == 0 and den == 0:
        return float("nan")
    if den == 0:
        return float("inf")
    if num == 0:
        return float("-inf")
    return 10.0 * math.log10(num / den)


def _cap(value: float, name: str, capped: Optional[List[str]] = None) -> float:
    cap = config.METRIC_CAP_DB
    if abs(value) >= cap:
        if capped is not None and name not in capped:
            capped.append(name)
        return float(np.clip(value, -cap, cap))
    return float(value)


def isinr(soi_out: np.ndarray, noise_out: np.ndarray, soi_in: np.ndarray, noise_in: np.ndarray,
          capped: Optional[List[str]] = None) -> float:
    """SINR(output) - SINR(reference input), whole signal."""
    gain = _ratio_db(_power(soi_out), _power(noise_out)) - _ratio_db(_power(soi_in), _power(noise_in))
    if math.isnan(gain):
        raise UndefinedMetric("iSINR undefined: silent SOI or undefined ratios")
    return _cap(gain, "isinr", capped)


def block_isinr(soi_out: np.ndarray, noise_out: np.ndarray, soi_in: np.ndarray, noise_in: np.ndarray,
                block_len: int, capped: Optional[List[str]] = None) -> np.ndarray:
    """iSINR per block of `block_len` samples (last block absorbs the remainder); silent blocks are NaN."""
    n = soi_out.shape[0]
    n_blocks = max(n // block_len, 1)
    bounds = block_bounds(n, n_blocks)
    values = []
    for t in range(n_blocks):
        sl = slice(bounds[t], bounds[t + 1])
        try:
            values.append(isinr(soi_out[sl], noise_out[sl], soi_in[sl], noise_in[sl], capped))
        except UndefinedMetric:
            values.append(float("nan"))
    return np.asarray(values)


def sdr(estimate: np.ndarray, reference: np.ndarray, max_delay: int = config.FFT_LEN,
        capped: Optional[List[str]] = None) -> float:
    """
    10 log10(||t||^2 / ||e - t||^2) where e is the estimate shifted by the best
    lag within +-max_delay and t its projection onto the reference.
    """
    s = np.asarray(reference, dtype=float).ravel()
    e = np.asarray(estimate, dtype=float).ravel()
    s_energy = float(np.dot(s, s))
    if s_energy == 0:
        raise UndefinedMetric("SDR undefined: the reference is silent")

    corr = correlate(e, s, mode="full", method="fft")
    lags = correlation_lags(e.size, s.size, mode="full")
    keep = np.abs(lags) <= max_delay
    corr, lags = corr[keep], lags[keep]

    cum = np.concatenate([[0.0], np.cumsum(e ** 2)])
    lo = np.clip(lags, 0, e.size)
    hi = np.clip(s.size + lags, 0, e.size)
    overlap = cum[np.maximum(hi, lo)] - cum[lo]

    target = corr ** 2 / s_energy
    error = np.maximum(overlap - target, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = 10.0 * np.log10(target / error)
    values = np.where(target == 0, -np.inf, values)
    return _cap(float(np.nanmax(values)), "sdr", capped)


def isdr(extracted: np.ndarray, true_image: np.ndarray, reference_input: np.ndarray,
         max_delay: int = config.FFT_LEN, capped: Optional[List[str]] = None) -> float:
    """SDR(extracted) - SDR(unprocessed reference channel), both against the true SOI image."""
    return _cap(sdr(extracted, true_image, max_delay, capped) - sdr(reference_input, true_image, max_delay, capped),
                "isdr", capped)


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

def evaluate_extraction(state: ExtractionState, truth: GroundTruth, stft_cfg: StftConfig = StftConfig(),
                        ref: int = config.REFERENCE_CHANNEL, fs: int = config.SAMPLE_RATE,
                        block_len: Optional[int] = None, algorithm: str = "", seed: Optional[int] = None,
                        wall_time: float = 0.0) -> MetricReport:
    """
    Apply the final (per-block rescaled) filter to the SOI image and to the
    interference+noise image separately and score the result.
    """
    capped: List[str] = []

    def filtered(image: np.ndarray) -> np.ndarray:
        spec = analyze(Waveform(image, fs), stft_cfg)
        return synthesize(apply_filter(state, spec, ref)).samples[:, 0]

    soi_in = truth.images["soi"][:, ref]
    bg_in = truth.background[:, ref]
    soi_out = filtered(truth.images["soi"])
    bg_out = filtered(truth.background)

    if block_len is None:
        block_len = max(soi_in.size // state.a.shape[1], 1)
    blocks = block_isinr(soi_out, bg_out, soi_in, bg_in, block_len, capped)
    global_isinr = isinr(soi_out, bg_out, soi_in, bg_in, capped)
    block_mean = float(np.nanmean(blocks)) if np.any(~np.isnan(blocks)) else global_isinr
    isdr_db = isdr(soi_out + bg_out, soi_in, soi_in + bg_in, stft_cfg.fft_len, capped)

    report = MetricReport(
        algorithm=algorithm,
        isinr_db=block_mean,
        isinr_global_db=global_isinr,
        isdr_db=isdr_db,
        fail=block_mean < config.FAIL_THRESHOLD_DB,
        seed=seed,
        wall_time=wall_time,
        block_isinr_db=blocks.tolist(),
        capped=capped,
    )
    logger.info(f"[EVAL] {algorithm} seed={seed}: iSINR={block_mean:.2f} dB, iSDR={isdr_db:.2f} dB")
    return report


def evaluate_synthetic(state: ExtractionState, mixture: SyntheticMixture, ref: int = config.REFERENCE_CHANNEL,
                       algorithm: str = "", seed: Optional[int] = None, wall_time: float = 0.0) -> MetricReport:
    """Spectral-domain iSINR for instantaneous CSV mixtures (iSDR is not defined there)."""
    capped: List[str] = []
    soi_out = rescale_output(state, mixture.soi_image, ref)
    bg_out = rescale_output(state, mixture.background_image, ref)
    soi_in = mixture.soi_image[:, :, ref]
    bg_in = mixture.background_image[:, :, ref]

    n_blocks = state.a.shape[1]
    bounds = block_bounds(soi_out.shape[1], n_blocks)
    blocks = []
    for t in range(n_blocks):
        sl = slice(bounds[t], bounds[t + 1])
        blocks.append(isinr(soi_out[:, sl], bg_out[:, sl], soi_in[:, sl], bg_in[:, sl], capped))
    block_mean = float(np.mean(blocks))
    return MetricReport(
        algorithm=algorithm,
        isinr_db=block_mean,
        isinr_global_db=isinr(soi_out, bg_out, soi_in, bg_in, capped),
        isdr_db=float("nan"),
        fail=block_mean < config.FAIL_THRESHOLD_DB,
        seed=seed,
        wall_time=wall_time,
        block_isinr_db=blocks,
        capped=capped,
    )


def fail_rate(reports: Sequence[MetricReport]) -> float:
    """Percentage of runs whose iSINR is below FAIL_THRESHOLD_DB."""
    if not reports:
        raise UndefinedMetric("fail rate needs at least one run")
    return 100.0 * sum(r.isinr_db < config.FAIL_THRESHOLD_DB for r in reports) / len(reports)


def metrics_table(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """One row per run + a summary row (mean ± std, fail %), per algorithm."""
    columns = ["seed", "algorithm", "isinr_db", "isinr_global_db", "isdr_db", "fail", "wall_time_s"]
    df = pd.DataFrame([r.to_row() for r in reports])
    if df.empty:
        return pd.DataFrame(columns=columns)
    df = df[columns]

    summaries = []
    for algorithm, group in df.groupby("algorithm", sort=False):
        row = {"seed": "summary", "algorithm": algorithm}
        for col in ("isinr_db", "isinr_global_db", "isdr_db", "wall_time_s"):
            row[col] = f"{group[col].mean():.2f} ± {group[col].std(ddof=0):.2f}"
        row["fail"] = f"{100.0 * group['fail'].mean():.0f}%"
        summaries.append(row)
    return pd.concat([df.astype(object), pd.DataFrame(summaries)], ignore_index=True)


# ----------------------------------------------------------------------
# Attenuation maps
# ----------------------------------------------------------------------

@dataclass
class GridSpec:
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    z: float
    spacing: float = config.ATTMAP_SPACING

    def points(self) -> np.ndarray:
        xs = np.arange(self.x_range[0], self.x_range[1] + 1e-9, self.spacing)
        ys = np.arange(self.y_range[0], self.y_range[1] + 1e-9, self.spacing)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, self.z)], axis=1)


@dataclass
class AttenuationMap:
    points: np.ndarray
    attenuation_db: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "x": self.points[:, 0],
            "y": self.points[:, 1],
            "z": self.points[:, 2],
            "attenuation_db": self.attenuation_db,
        })


def _point_attenuation(point: np.ndarray, filt: np.ndarray, room: RoomSpec, mics: np.ndarray,
                       stft_cfg: StftConfig, fs: int, n_samples: int, seed) -> float:
    noise = np.random.default_rng(seed).standard_normal(n_samples)
    rirs = room_rirs(room, point, mics, fs)
    images = np.stack([fftconvolve(noise, h)[:n_samples] for h in rirs], axis=1)
    X = analyze(Waveform(images, fs), stft_cfg).coeffs
    y = np.einsum("kd,knd->kn", filt.conj(), X)

    gain = float(np.mean(np.sum(np.abs(filt) ** 2, axis=1)))
    p_out = _power(y)
    p_in = _power(X)            # mean over microphones
    if gain == 0 or p_in == 0:
        raise UndefinedMetric("attenuation undefined for a zero filter or silent input")
    return _cap(_ratio_db(p_out, gain * p_in), "attenuation")


def attenuation_at(points: np.ndarray, filt: np.ndarray, room: RoomSpec, mics: np.ndarray,
                   stft_cfg: StftConfig = StftConfig(), fs: int = config.SAMPLE_RATE,
                   duration: float = config.ATTMAP_DURATION, seed=None, n_jobs: int = 1) -> np.ndarray:
    """
    Attenuation (dB) of a white-noise source at each point by the filter
    `filt` (K, d), relative to the mean input power over microphones. The
    filter's global gain is normalized out.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_samples = int(round(duration * fs))
    seeds = np.random.SeedSequence(seed).spawn(points.shape[0])
    values = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_point_attenuation)(p, filt, room, mics, stft_cfg, fs, n_samples, s)
        for p, s in zip(points, seeds)
    )
    return np.asarray(values)


def attenuation_map(filt: np.ndarray, room: RoomSpec, mics: np.ndarray, grid: GridSpec, seed=None,
                    stft_cfg: StftConfig = StftConfig(), fs: int = config.SAMPLE_RATE,
                    duration: float = config.ATTMAP_DURATION, n_jobs: int = 1) -> AttenuationMap:
    points = grid.points()
    logger.info(f"[EVAL] attenuation map over {points.shape[0]} points ({n_jobs} worker(s))")
    return AttenuationMap(points, attenuation_at(points, filt, room, mics, stft_cfg, fs, duration, seed, n_jobs))
