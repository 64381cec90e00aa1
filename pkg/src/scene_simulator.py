"""
Scene Simulator
===============
Ground-truth scenes for the extraction algorithms.

Architecture:
    - image_method_rir()      : shoebox RIR, Sabine absorption, windowed-sinc
                                fractional delays
    - moving_mixture()        : SOI walking a waypoint path (crossfaded RIRs),
                                static interferer(s) and noise sources
    - synthetic_csv_mixture() : exact instantaneous CSV mixture in the STFT
                                domain, with the true separating/mixing vectors
    - write_scene()           : mixture + component WAVs + JSON manifest

Every generator is deterministic given its seed.
"""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.signal import fftconvolve, get_window

import config
from extraction_errors import ConfigError, InvalidGeometry, InvalidScenario
from mixing_model import block_bounds, build_mixing_matrix
from source_model import sample_vector_laplace, vector_laplace_bin_variance
from stft_service import SpectralTensor, StftConfig, Waveform, read_wav, synthesize, write_wav


@dataclass
class RoomSpec:
    dimensions: Sequence[float]
    t60: float
    speed_of_sound: float = config.SPEED_OF_SOUND

    def __post_init__(self):
        self.dimensions = np.asarray(self.dimensions, dtype=float)
        if self.dimensions.shape != (3,) or np.any(self.dimensions <= 0):
            raise InvalidGeometry(f"room dimensions must be 3 positive lengths, got {self.dimensions}")
        if self.t60 < 0:
            raise InvalidGeometry(f"t60 must be >= 0, got {self.t60}")

    @property
    def volume(self) -> float:
        return float(np.prod(self.dimensions))

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return float(2 * (lx * ly + lx * lz + ly * lz))

    def absorption(self) -> float:
        """Sabine: t60 = 24 ln(10) V / (c S alpha)."""
        if self.t60 == 0:
            return 1.0
        alpha = 24 * math.log(10) * self.volume / (self.speed_of_sound * self.surface * self.t60)
        if alpha > 1.0:
            logger.warning(f"[SIM] t60={self.t60}s too short for this room, absorption clipped to 1")
            alpha = 1.0
        return alpha

    def reflection(self) -> float:
        return math.sqrt(1.0 - self.absorption())

    def contains(self, position: Sequence[float]) -> bool:
        p = np.asarray(position, dtype=float)
        return bool(np.all(p >= 0) and np.all(p <= self.dimensions))


@dataclass
class Waypoint:
    position: Sequence[float]
    dwell: float


@dataclass
class PathSpec:
    waypoints: List[Waypoint]

    @classmethod
    def static(cls, position: Sequence[float], duration: float) -> "PathSpec":
        return cls([Waypoint(list(position), duration)])

    @property
    def duration(self) -> float:
        return float(sum(wp.dwell for wp in self.waypoints))

    def boundaries(self, fs: int, n_samples: int) -> np.ndarray:
        """Sample index where each waypoint starts, plus n_samples at the end."""
        starts = np.round(np.cumsum([0.0] + [wp.dwell for wp in self.waypoints[:-1]]) * fs).astype(int)
        return np.append(np.minimum(starts, n_samples), n_samples)


@dataclass
class SourceSpec:
    name: str
    path: PathSpec
    signal: Optional[np.ndarray] = None


@dataclass
class Scenario:
    room: RoomSpec
    mics: np.ndarray
    soi: SourceSpec
    interferers: List[SourceSpec] = field(default_factory=list)
    noise: List[SourceSpec] = field(default_factory=list)
    duration: float = 10.0
    sample_rate: int = config.SAMPLE_RATE
    interferer_to_noise_db: float = 0.0
    soi_to_background_db: float = 0.0
    max_order: Optional[int] = None

    def __post_init__(self):
        self.mics = np.atleast_2d(np.asarray(self.mics, dtype=float))

    @classmethod
    def from_dict(cls, data: Dict, base_dir: str = ".") -> "Scenario":
        """Scenario from the `scenario:` section of a run configuration."""
        try:
            room = RoomSpec(data["room"]["dimensions"], float(data["room"].get("t60", 0.0)))
        except KeyError as exc:
            raise ConfigError(f"missing key {exc}", field="scenario.room") from exc
        fs = int(data.get("sample_rate", config.SAMPLE_RATE))
        duration = float(data.get("duration", 10.0))

        mics_cfg = data.get("mics")
        if mics_cfg is None:
            raise ConfigError("microphones are required", field="scenario.mics")
        if isinstance(mics_cfg, dict):
            mics = linear_array(mics_cfg["center"], int(mics_cfg.get("count", 5)),
                                float(mics_cfg.get("spacing", 0.05)), mics_cfg.get("axis", "x"))
        else:
            mics = np.asarray(mics_cfg, dtype=float)

        def source(name: str, spec: Dict, where: str) -> SourceSpec:
            signal = None
            if spec.get("signal"):
                wav = read_wav(os.path.join(base_dir, spec["signal"]), expected_rate=fs, field=f"{where}.signal")
                signal = wav.samples[:, 0]
            return SourceSpec(name, _path_from_dict(spec, duration, where), signal)

        if "soi" not in data:
            raise ConfigError("source of interest is required", field="scenario.soi")
        soi = source("soi", data["soi"], "scenario.soi")
        interferers = [source(f"interferer{i}", s, f"scenario.interferers[{i}]")
                       for i, s in enumerate(data.get("interferers", []))]
        noise = [source(f"noise{i}", s, f"scenario.noise[{i}]") for i, s in enumerate(data.get("noise", []))]

        ratios = data.get("ratios", {})
        return cls(
            room=room,
            mics=mics,
            soi=soi,
            interferers=interferers,
            noise=noise,
            duration=duration,
            sample_rate=fs,
            interferer_to_noise_db=float(ratios.get("interferer_to_noise_db", 0.0)),
            soi_to_background_db=float(ratios.get("soi_to_background_db", 0.0)),
            max_order=data.get("max_order"),
        )


@dataclass
class GroundTruth:
    images: Dict[str, np.ndarray]           # "soi" | "interference" | "noise" -> (n, M)
    segment_bounds: np.ndarray              # SOI waypoint boundaries in samples
    soi_dry: np.ndarray

    @property
    def background(self) -> np.ndarray:
        return self.images["interference"] + self.images["noise"]


@dataclass
class SceneMixture:
    mixture: Waveform
    truth: GroundTruth
    scenario: Scenario


@dataclass
class SyntheticMixture:
    x: SpectralTensor
    w_true: np.ndarray              # (K, d)
    a_true: np.ndarray              # (K, T, d)
    sigma2: np.ndarray              # (K, T) per-block SOI variances
    soi: np.ndarray                 # (K, N)
    soi_image: np.ndarray           # (K, N, d)
    background_image: np.ndarray    # (K, N, d)


# ----------------------------------------------------------------------
# Geometry helpers
# ----------------------------------------------------------------------

def linear_array(center: Sequence[float], count: int, spacing: float, axis: str = "x") -> np.ndarray:
    axes = {"x": 0, "y": 1, "z": 2}
    if axis not in axes:
        raise ConfigError(f"unknown array axis '{axis}'", field="scenario.mics.axis")
    offsets = (np.arange(count) - (count - 1) / 2.0) * spacing
    mics = np.tile(np.asarray(center, dtype=float), (count, 1))
    mics[:, axes[axis]] += offsets
    return mics


def arc_path(center: Sequence[float], radius: float, start_deg: float, end_deg: float,
             n_points: int, duration: float) -> PathSpec:
    """Equidistant waypoints on a horizontal arc, equal dwell."""
    angles = np.deg2rad(np.linspace(start_deg, end_deg, n_points))
    c = np.asarray(center, dtype=float)
    dwell = duration / n_points
    return PathSpec([
        Waypoint([c[0] + radius * np.cos(ang), c[1] + radius * np.sin(ang), c[2]], dwell)
        for ang in angles
    ])


def random_grid_path(room: RoomSpec, start: Sequence[float], step: float, max_steps: int,
                     change_every: float, duration: float, seed=None) -> PathSpec:
    """Random walk on a grid: every `change_every` seconds jump to a random point within +-max_steps."""
    rng = np.random.default_rng(seed)
    pos = np.asarray(start, dtype=float)
    n_points = int(math.ceil(duration / change_every))
    waypoints = []
    for i in range(n_points):
        waypoints.append(Waypoint(pos.tolist(), min(change_every, duration - i * change_every)))
        jump = rng.integers(-max_steps, max_steps + 1, size=2) * step
        candidate = pos.copy()
        candidate[:2] += jump
        if room.contains(candidate):
            pos = candidate
    return PathSpec(waypoints)


def _path_from_dict(spec: Dict, duration: float, where: str) -> PathSpec:
    if "position" in spec:
        return PathSpec.static(spec["position"], duration)
    path = spec.get("path")
    if path is None:
        raise ConfigError("source needs `position` or `path`", field=where)
    if "arc" in path:
        arc = path["arc"]
        return arc_path(arc["center"], float(arc["radius"]), float(arc["start_deg"]), float(arc["end_deg"]),
                        int(arc["points"]), float(arc.get("duration", duration)))
    if "waypoints" in path:
        return PathSpec([Waypoint(wp["position"], float(wp["dwell"])) for wp in path["waypoints"]])
    raise ConfigError("path needs `arc` or `waypoints`", field=f"{where}.path")


# ----------------------------------------------------------------------
# Image method
# ----------------------------------------------------------------------

def image_method_rir(room: RoomSpec, src: Sequence[float], mic: Sequence[float], fs: int = config.SAMPLE_RATE,
                     max_order: Optional[int] = None, length: Optional[int] = None) -> np.ndarray:
    """
    Shoebox room impulse response by the image method.

    Each image contributes beta^n / (4 pi dist) at delay dist / c, spread over
    a Hann-windowed sinc of FRACTIONAL_DELAY_TAPS samples. Length defaults to
    max(t60 * fs, direct delay + window) samples.
    """
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    if not room.contains(src) or not room.contains(mic):
        raise InvalidGeometry(f"source {src.tolist()} or microphone {mic.tolist()} outside the room")
    direct = float(np.linalg.norm(src - mic))
    if direct <= 0:
        raise InvalidGeometry("source and microphone coincide")

    c = room.speed_of_sound
    taps = config.FRACTIONAL_DELAY_TAPS
    half = taps / 2.0
    if length is None:
        length = int(max(math.ceil(room.t60 * fs), math.ceil(direct / c * fs + half))) + 1
    beta = room.reflection()
    max_dist = (length + half) * c / fs

    L = room.dimensions
    if beta == 0.0:
        n_max = np.zeros(3, dtype=int)
    else:
        n_max = np.ceil(max_dist / (2 * L)).astype(int) + 1
    if max_order is not None:
        n_max = np.minimum(n_max, max_order)

    grids = np.meshgrid(*[np.arange(-m, m + 1) for m in n_max], indexing="ij")
    n_all = np.stack([g.ravel() for g in grids], axis=1)
    parities = np.array([[qx, qy, qz] for qx in (0, 1) for qy in (0, 1) for qz in (0, 1)])

    h = np.zeros(length)
    offsets = np.arange(-int(half), int(half) + 1)
    for q in parities:
        for start in range(0, n_all.shape[0], config.IMAGE_CHUNK):
            n = n_all[start:start + config.IMAGE_CHUNK]
            count = np.sum(np.abs(n - q) + np.abs(n), axis=1)
            pos = (1 - 2 * q) * src + 2 * n * L
            dist = np.linalg.norm(pos - mic, axis=1)
            keep = dist <= max_dist
            if max_order is not None:
                keep &= count <= max_order
            if beta == 0.0:
                keep &= count == 0
            if not np.any(keep):
                continue
            dist = dist[keep]
            amp = np.power(beta, count[keep]) / (4 * np.pi * dist)
            delay = dist / c * fs

            idx = np.floor(delay).astype(int)[:, None] + offsets[None, :]
            t = idx - delay[:, None]
            win = 0.5 * (1 + np.cos(2 * np.pi * t / taps))
            valid = (np.abs(t) < half) & (idx >= 0) & (idx < length)
            np.add.at(h, idx[valid], (amp[:, None] * win * np.sinc(t))[valid])
    return h


def room_rirs(room: RoomSpec, src: Sequence[float], mics: np.ndarray, fs: int,
              max_order: Optional[int] = None, length: Optional[int] = None) -> List[np.ndarray]:
    return [image_method_rir(room, src, m, fs, max_order, length) for m in mics]


# ----------------------------------------------------------------------
# Moving-source mixtures
# ----------------------------------------------------------------------

def crossfade_weights(bounds: np.ndarray, fs: int) -> np.ndarray:
    """
    (J, n) weights summing to one: plateau inside each segment, complementary
    Hamming ramps of fs/32 samples (a fs/16 Hamming window, half overlap)
    around every segment change.
    """
    n = int(bounds[-1])
    n_seg = len(bounds) - 1
    weights = np.zeros((n_seg, n))
    for j in range(n_seg):
        weights[j, bounds[j]:bounds[j + 1]] = 1.0
    if n_seg == 1:
        return weights

    ramp_len = int(round(fs * config.CROSSFADE_FRACTION)) // 2
    if ramp_len < 2:
        return weights
    ham = get_window("hamming", 2 * ramp_len, fftbins=True)
    up = ham[:ramp_len] / (ham[:ramp_len] + ham[ramp_len:])
    for j in range(1, n_seg):
        b = int(bounds[j])
        lo, hi = b - ramp_len // 2, b - ramp_len // 2 + ramp_len
        if lo < bounds[j - 1] or hi > bounds[j + 1]:
            raise InvalidScenario(f"segment {j} shorter than the crossfade ({ramp_len} samples)")
        weights[j - 1, lo:hi] = 1.0 - up
        weights[j, lo:hi] = up
    return weights


def _source_image(source: SourceSpec, dry: np.ndarray, scenario: Scenario, n: int) -> np.ndarray:
    fs = scenario.sample_rate
    bounds = source.path.boundaries(fs, n)
    weights = crossfade_weights(bounds, fs)
    image = np.zeros((n, scenario.mics.shape[0]))
    for j, wp in enumerate(source.path.waypoints):
        seg = dry[:n] * weights[j]
        if not np.any(seg):
            continue
        for m, rir in enumerate(room_rirs(scenario.room, wp.position, scenario.mics, fs, scenario.max_order)):
            image[:, m] += fftconvolve(seg, rir)[:n]
    return image


def _power(x: np.ndarray) -> float:
    return float(np.mean(x ** 2))


def speech_surrogate(duration: float, fs: int = config.SAMPLE_RATE, seed=None,
                     stft_cfg: StftConfig = StftConfig()) -> np.ndarray:
    """
    Unit-RMS speech-like signal: vector-Laplace STFT frames under a smooth
    random log-normal envelope with pauses, synthesized to the time domain.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    n_frames = int(math.ceil(max(n - stft_cfg.fft_len, 0) / stft_cfg.hop)) + 1
    frames = sample_vector_laplace(stft_cfg.n_bins, n_frames, rng)

    # syllable-rate envelope: 8 dB log-normal, smoothed over ~8 frames, 20% pauses
    log_env = np.convolve(rng.standard_normal(n_frames), np.ones(8) / np.sqrt(8), mode="same")
    env = 10 ** (0.4 * log_env)
    env[rng.random(n_frames) < 0.2] *= 0.05
    frames = frames * env[None, :]

    spec = SpectralTensor(frames[:, :, None], stft_cfg.fft_len, stft_cfg.hop, stft_cfg.window_id, fs, n)
    signal = synthesize(spec).samples[:, 0]
    return signal / np.sqrt(_power(signal))


def moving_mixture(scenario: Scenario, seed=None) -> SceneMixture:
    """
    Mixture = SOI image + interference image + noise image (in that order),
    power ratios set by the scenario. Deterministic given `seed`.
    """
    fs = scenario.sample_rate
    n = int(round(scenario.duration * fs))
    if scenario.soi.path.duration + 1.0 / fs < scenario.duration:
        raise InvalidScenario(f"SOI path covers {scenario.soi.path.duration}s of a {scenario.duration}s scene")

    children = np.random.SeedSequence(seed).spawn(1 + len(scenario.interferers) + len(scenario.noise))
    logger.info(f"[SIM] scene: {scenario.mics.shape[0]} mics, {len(scenario.soi.path.waypoints)} SOI waypoints, "
                f"{len(scenario.interferers)} interferer(s), {len(scenario.noise)} noise source(s)")

    def dry_of(source: SourceSpec, child, surrogate: bool) -> np.ndarray:
        if source.signal is not None:
            if len(source.signal) < n:
                raise InvalidScenario(f"{source.name}: signal has {len(source.signal)} samples, scene needs {n}")
            return np.asarray(source.signal[:n], dtype=float)
        rng = np.random.default_rng(child)
        return speech_surrogate(scenario.duration, fs, rng) if surrogate else rng.standard_normal(n)

    soi_dry = dry_of(scenario.soi, children[0], surrogate=True)
    soi_img = _source_image(scenario.soi, soi_dry, scenario, n)
    zeros = np.zeros_like(soi_img)

    int_img = zeros.copy()
    for i, src in enumerate(scenario.interferers):
        int_img += _source_image(src, dry_of(src, children[1 + i], False), scenario, n)
    noise_img = zeros.copy()
    for i, src in enumerate(scenario.noise):
        noise_img += _source_image(src, dry_of(src, children[1 + len(scenario.interferers) + i], False), scenario, n)

    if scenario.interferers and scenario.noise:
        p_int, p_noise = _power(int_img), _power(noise_img)
        if p_int == 0 or p_noise == 0:
            raise InvalidScenario("interferer or noise image has zero power")
        noise_img *= np.sqrt(p_int / p_noise / 10 ** (scenario.interferer_to_noise_db / 10))

    p_bg = _power(int_img + noise_img)
    p_soi = _power(soi_img)
    if p_soi == 0:
        raise InvalidScenario("SOI image has zero power")
    if p_bg > 0:
        soi_img *= np.sqrt(p_bg / p_soi * 10 ** (scenario.soi_to_background_db / 10))
    else:
        logger.warning("[SIM] no interference or noise sources: mixture is the SOI image alone")

    mixture = soi_img + int_img + noise_img
    truth = GroundTruth(
        images={"soi": soi_img, "interference": int_img, "noise": noise_img},
        segment_bounds=scenario.soi.path.boundaries(fs, n),
        soi_dry=soi_dry,
    )
    return SceneMixture(Waveform(mixture, fs), truth, scenario)


# ----------------------------------------------------------------------
# Synthetic instantaneous CSV mixtures
# ----------------------------------------------------------------------

def _crandn(rng, *shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def synthetic_csv_mixture(n_bins: int, n_channels: int, n_blocks: int, block_frames: int,
                          seed=None) -> SyntheticMixture:
    """
    x_{k,l} = A_{k,t} [s_{k,l}; z_{k,l}] with a shared separating vector per bin.

    SOI: vector-Laplace, unit variance per bin, scaled per block by a variance
    drawn log-uniform in [0.25, 4]. Background: circular Gaussian, unit
    variance. w_true^H x = s holds exactly.
    """
    if n_channels < 2:
        raise InvalidScenario(f"need at least 2 channels, got {n_channels}")
    rng = np.random.default_rng(seed)
    K, d, T = n_bins, n_channels, n_blocks
    N = T * block_frames
    labels = np.repeat(np.arange(T), np.diff(block_bounds(N, T)))

    s = sample_vector_laplace(K, N, rng) / np.sqrt(vector_laplace_bin_variance(K))
    sigma2 = np.exp(rng.uniform(np.log(0.25), np.log(4.0), size=(K, T)))
    s = s * np.sqrt(sigma2)[:, labels]
    z = _crandn(rng, K, N, d - 1)

    beta = np.exp(2j * np.pi * rng.random(K))
    h = 0.3 * _crandn(rng, K, d - 1)
    g = 0.5 * _crandn(rng, K, T, d - 1)
    gamma = (1.0 - np.einsum("kd,ktd->kt", h.conj(), g)) / np.conj(beta)[:, None]
    a = np.concatenate([gamma[..., None], g], axis=-1)
    w = np.concatenate([beta[:, None], h], axis=-1)

    A = build_mixing_matrix(a, np.broadcast_to(h[:, None, :], (K, T, d - 1)))
    soi_image = a[:, labels, :] * s[..., None]
    background = np.einsum("knij,knj->kni", A[:, labels, :, 1:], z)
    x = soi_image + background

    fft_len = 2 * (K - 1)
    tensor = SpectralTensor(x, fft_len=fft_len, hop=max(K - 1, 1), sample_rate=config.SAMPLE_RATE)
    logger.debug(f"[SIM] synthetic CSV mixture K={K} d={d} T={T} N_b={block_frames}")
    return SyntheticMixture(tensor, w, a, sigma2, s, soi_image, background)


# ----------------------------------------------------------------------
# Output
# ----------------------------------------------------------------------

def write_scene(out_dir: str, scene: SceneMixture, config_echo: Optional[Dict] = None) -> Dict[str, str]:
    fs = scene.mixture.sample_rate
    paths = {"mixture": write_wav(os.path.join(out_dir, "mixture.wav"), scene.mixture)}
    for name, img in scene.truth.images.items():
        paths[name] = write_wav(os.path.join(out_dir, "images", f"{name}.wav"), Waveform(img, fs))
    paths["soi_dry"] = write_wav(os.path.join(out_dir, "images", "soi_dry.wav"), Waveform(scene.truth.soi_dry, fs))

    manifest = {
        "config": config_echo or {},
        "sample_rate": fs,
        "n_samples": scene.mixture.n_samples,
        "mics": scene.scenario.mics.tolist(),
        "segment_bounds": scene.truth.segment_bounds.tolist(),
        "files": {k: os.path.relpath(v, out_dir) for k, v in paths.items()},
    }
    paths["manifest"] = write_json(os.path.join(out_dir, "groundtruth.json"), manifest)
    logger.info(f"[SIM] ✅ scene written to {out_dir}")
    return paths


def write_json(path: str, payload: Dict) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
    os.replace(tmp, path)
    return path
