"""
Extraction Engine
=================
Blind extraction of one source of interest (SOI) under the block-wise CSV
mixing model.

Algorithms:
    - bogive_w       : gradient ascent on the contrast (step size mu)
    - block_auxive   : auxiliary-function (MM) iterations, no step size
    - piloted_*      : block_auxive with a pilot term in the frame norm
    - ogive_w/overiva: the same updates with a single block (static mixing)

Every run returns an ExtractionResult carrying the final state, the SOI
estimate rescaled to the reference microphone, and an iteration trace
(pandas DataFrame).

Usage:
    from extraction_engine import ExtractionEngine, AlgoConfig
    engine = ExtractionEngine()
    result = engine.run("block_auxive", x, AlgoConfig(n_blocks=4))
"""

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

import config
from extraction_errors import ConfigError, DegenerateCovariance, DegenerateNu, SingularAuxSystem
from mixing_model import (
    AuxiliaryMatrices,
    BlockCovariances,
    ExtractionState,
    block_bounds,
    block_covariances,
    coeffs_of,
    contrast,
    normalized_estimates,
    ogc_state,
    soi_estimates,
)
from source_model import PilotSignal, aux_nonlinearity, frame_norms, score
from stft_service import SpectralTensor, Waveform, synthesize
from steering_vectors import delay_and_sum, point_steering_vector, steering_vector


@dataclass
class InitSpec:
    kind: str = "unit_vector"   # unit_vector | steering_vector | point | explicit
    channel: int = 0
    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    point: Optional[Sequence[float]] = None
    mics: Optional[np.ndarray] = None
    vectors: Optional[np.ndarray] = None


@dataclass
class AlgoConfig:
    n_blocks: int = 1
    max_iter: Optional[int] = None          # None -> algorithm default
    step_size: float = config.STEP_SIZE
    tol: float = config.GRADIENT_TOL
    early_stop: bool = False
    early_stop_tol: float = config.AUX_EARLY_STOP_TOL
    init: InitSpec = field(default_factory=InitSpec)
    reference_channel: int = config.REFERENCE_CHANNEL
    track_contrast: bool = True

    def validate(self, n_channels: int) -> "AlgoConfig":
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}", field="algorithm.n_blocks")
        if self.max_iter is not None and self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}", field="algorithm.max_iter")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}", field="algorithm.step_size")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}", field="algorithm.tol")
        if not self.early_stop_tol > 0:
            raise ConfigError(f"early_stop_tol must be > 0, got {self.early_stop_tol}", field="algorithm.early_stop_tol")
        if not 0 <= self.reference_channel < n_channels:
            raise ConfigError(
                f"reference channel {self.reference_channel} outside 0..{n_channels - 1}",
                field="algorithm.reference_channel",
            )
        return self


@dataclass
class ExtractionResult:
    algorithm: str
    state: ExtractionState
    output: np.ndarray              # (K, N) SOI image at the reference microphone
    trace: pd.DataFrame
    converged: bool
    n_iter: int
    wall_time: float
    extracted: Optional[Waveform] = None


# ----------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------

def initial_vectors(init: InitSpec, x) -> np.ndarray:
    coeffs = coeffs_of(x)
    n_bins, _, d = coeffs.shape
    if init.kind == "unit_vector":
        if not 0 <= init.channel < d:
            raise ConfigError(f"init channel {init.channel} outside 0..{d - 1}", field="algorithm.init.channel")
        w = np.zeros((n_bins, d), dtype=np.complex128)
        w[:, init.channel] = 1.0
        return w
    if init.kind in ("steering_vector", "point"):
        if init.mics is None:
            raise ConfigError("steering initialization needs microphone positions", field="algorithm.init.mics")
        freqs = x.freqs() if isinstance(x, SpectralTensor) else np.arange(n_bins)
        if init.kind == "point":
            d_vec = point_steering_vector(init.mics, init.point, freqs)
        else:
            d_vec = steering_vector(init.mics, init.azimuth_deg, init.elevation_deg, freqs)
        return delay_and_sum(d_vec)
    if init.kind == "explicit":
        w = np.asarray(init.vectors, dtype=np.complex128)
        return np.broadcast_to(w, (n_bins, d)).copy()
    raise ConfigError(f"unknown init kind '{init.kind}'", field="algorithm.init.kind")


def normalize_first(w: np.ndarray, flags: Optional[List[str]] = None) -> np.ndarray:
    """w_k <- w_k / (w_k)_1, falling back to the largest entry when (w_k)_1 vanishes."""
    w = np.array(w, dtype=np.complex128)
    norms = np.linalg.norm(w, axis=1)
    first = w[:, 0]
    small = np.abs(first) <= 1e-12 * np.maximum(norms, np.finfo(float).tiny)
    pivot = first.copy()
    if np.any(small):
        idx = np.argmax(np.abs(w[small]), axis=1)
        pivot[small] = w[small][np.arange(idx.size), idx]
        msg = f"renormalized by largest entry in {int(np.sum(small))} bins"
        if flags is not None and msg not in flags:
            flags.append(msg)
        logger.warning(f"[MODEL] {msg}")
    pivot = np.where(np.abs(pivot) > 0, pivot, 1.0)
    return w / pivot[:, None]


def coupled_state(w: np.ndarray, blocks: BlockCovariances, flags: Optional[List[str]] = None) -> ExtractionState:
    """
    OGC state for the iteration loops. (bin, block) pairs with w^H C w = 0
    (silent bin or block) are flagged and left out of the updates; only a
    state with no active pair at all raises DegenerateCovariance.
    """
    state = ogc_state(w, blocks, strict=False)
    if flags is not None:
        state.flags = flags
    inactive = int(np.sum(~state.active))
    if inactive == state.active.size:
        raise DegenerateCovariance("w^H C w vanishes in every (bin, block) pair")
    if inactive:
        state.flag(f"OGC: w^H C w vanishes in {inactive} (bin, block) pairs, left out of the updates")
    return state


def _check_input(x) -> np.ndarray:
    coeffs = coeffs_of(x)
    if coeffs.ndim != 3 or coeffs.shape[2] < 2:
        raise ConfigError(f"extraction needs a (K, N, d>=2) mixture, got shape {coeffs.shape}", field="io.input")
    return coeffs


# ----------------------------------------------------------------------
# BOGIVE_w (gradient)
# ----------------------------------------------------------------------

def nu(s_tilde: np.ndarray, blocks: BlockCovariances, active: Optional[np.ndarray] = None) -> np.ndarray:
    """
    nu_{k,t} = E_t[phi_k(s_tilde)^* s_tilde_k], shape (K, T). Pairs outside
    `active` are set to 1 and never raise.
    """
    vals = np.conj(score(s_tilde)) * s_tilde
    out = np.stack([vals[:, sl].mean(axis=1) for sl in blocks.slices()], axis=1)
    if active is None:
        active = np.ones(out.shape, dtype=bool)
    small = active & (np.abs(out) < config.EPS_NU)
    if np.any(small):
        raise DegenerateNu(f"nu vanishes in {int(np.sum(small))} (bin, block) pairs")
    return np.where(active, out, 1.0)


def gradient_delta(state: ExtractionState, x, blocks: BlockCovariances) -> np.ndarray:
    """
    Delta_k = 1/T sum_t { a_{k,t} - nu_{k,t}^-1 E_t[phi_k^* x_k / sigma_{k,t}] }

    Zero at a stationary point of the contrast. Inactive (bin, block) pairs
    carry no weight; a bin with no active block gets Delta_k = 0.
    """
    coeffs = coeffs_of(x)
    active = state.active
    s_tilde = normalized_estimates(state, coeffs, blocks)
    phi = score(s_tilde)
    nu_kt = nu(s_tilde, blocks, active)

    psi = np.empty_like(state.a)
    for t, sl in enumerate(blocks.slices()):
        psi[:, t] = np.einsum("kn,knd->kd", np.conj(phi[:, sl]), coeffs[:, sl]) / (sl.stop - sl.start)
    psi /= state.safe_sigma()[..., None]
    terms = np.where(active[..., None], state.a - psi / nu_kt[..., None], 0.0)
    return terms.sum(axis=1) / np.maximum(active.sum(axis=1), 1)[:, None]


def bogive_w_step(w: np.ndarray, x, blocks: BlockCovariances, step_size: float = config.STEP_SIZE,
                  flags: Optional[List[str]] = None) -> np.ndarray:
    state = coupled_state(w, blocks, flags)
    return normalize_first(w + step_size * gradient_delta(state, x, blocks), flags)


def bogive_w(x, cfg: AlgoConfig = AlgoConfig(), name: str = "bogive_w") -> ExtractionResult:
    """
    Gradient ascent on the block contrast. Stops after max_iter iterations or
    once max_k ||Delta_k|| < tol; `converged` reports whether the tolerance
    fired.
    """
    t0 = time.perf_counter()
    coeffs = _check_input(x)
    cfg.validate(coeffs.shape[2])
    blocks = block_covariances(coeffs, cfg.n_blocks)
    flags: List[str] = []
    w = normalize_first(initial_vectors(cfg.init, x), flags)
    max_iter = cfg.max_iter or config.GRADIENT_ITERATIONS

    logger.info(f"[BOGIVE] {name}: K={coeffs.shape[0]} N={coeffs.shape[1]} d={coeffs.shape[2]} "
                f"T={blocks.n_blocks} mu={cfg.step_size}")
    rows = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        state = coupled_state(w, blocks, flags)
        delta = gradient_delta(state, coeffs, blocks)
        delta_norm = float(np.max(np.linalg.norm(delta, axis=1)))
        w = normalize_first(w + cfg.step_size * delta, flags)

        row = {"iteration": it, "contrast": np.nan, "delta_norm": delta_norm}
        if cfg.track_contrast:
            current = coupled_state(w, blocks, flags)
            row["contrast"] = contrast(current, coeffs, blocks)
        rows.append(row)

        if delta_norm < cfg.tol:
            converged = True
            break

    return _finish(name, x, coeffs, w, blocks, flags, rows, converged, it, cfg, t0)


# ----------------------------------------------------------------------
# Block AuxIVE (auxiliary function)
# ----------------------------------------------------------------------

def auxiva_weighted_covariances(w: np.ndarray, x, blocks: BlockCovariances,
                                pilot: Optional[PilotSignal] = None,
                                scales: Optional[np.ndarray] = None,
                                r: Optional[np.ndarray] = None) -> AuxiliaryMatrices:
    """V_{k,t} = E_t[phi(r_l) x_{k,l} x_{k,l}^H], r from frame_norms() unless given."""
    coeffs = coeffs_of(x)
    if r is None:
        r = frame_norms(w, coeffs, pilot, scales)
    weights = aux_nonlinearity(r)
    n_bins, _, d = coeffs.shape
    V = np.empty((n_bins, blocks.n_blocks, d, d), dtype=np.complex128)
    for t, sl in enumerate(blocks.slices()):
        blk = coeffs[:, sl]
        V[:, t] = np.einsum("n,knd,kne->kde", weights[sl], blk, blk.conj()) / blk.shape[1]
    return AuxiliaryMatrices(V=V, r=r)


def solve_w(V: np.ndarray, a: np.ndarray, sigma: np.ndarray, w_prev: np.ndarray,
            flags: Optional[List[str]] = None) -> np.ndarray:
    """
    w_k = (sum_t V_{k,t} / sigma^2)^-1 sum_t (w^H V w / sigma^2) a_{k,t}

    with w^H V w from the previous iterate, then w_k /= sqrt(sum_t w_k^H V_{k,t} w_k).
    Blocks with sigma = 0 get zero weight; a bin where every block has sigma = 0 keeps w_prev.
    """
    active = sigma > 0
    idle = ~np.any(active, axis=1)
    inv_s2 = np.where(active, 1.0 / np.where(active, sigma, 1.0) ** 2, 0.0)
    weights = np.real(np.einsum("kd,ktde,ke->kt", w_prev.conj(), V, w_prev)) * inv_s2
    M = np.einsum("kt,ktde->kde", inv_s2, V)
    rhs = np.einsum("kt,ktd->kd", weights, a)
    if np.any(idle):
        M[idle] = np.eye(M.shape[-1])
        rhs[idle] = w_prev[idle]

    cond = np.linalg.cond(M)
    bad = ~np.isfinite(cond) | (cond > config.COND_LIMIT)
    if np.any(bad):
        tr = np.real(np.trace(M, axis1=-2, axis2=-1))
        M = M.copy()
        M[bad] += (config.EPS_REG * tr[bad])[:, None, None] * np.eye(M.shape[-1])
        msg = f"ridge: auxiliary system ill-conditioned in {int(np.sum(bad))} bins"
        if flags is not None and msg not in flags:
            flags.append(msg)
        logger.warning(f"[AUXIVE] {msg}")

    try:
        w = np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularAuxSystem(f"auxiliary system is singular: {exc}") from exc

    scale2 = np.real(np.einsum("kd,ktde,ke->k", w.conj(), V, w))
    scale2[idle] = 1.0
    if not np.all(np.isfinite(w)) or np.any(scale2 <= 0):
        raise SingularAuxSystem("auxiliary update produced a degenerate separating vector")
    return w / np.sqrt(scale2)[:, None]


def block_auxive_step(w: np.ndarray, x, blocks: BlockCovariances, pilot: Optional[PilotSignal] = None,
                      flags: Optional[List[str]] = None) -> np.ndarray:
    state = coupled_state(w, blocks, flags)
    aux = auxiva_weighted_covariances(w, x, blocks, pilot)
    return solve_w(aux.V, state.a, state.sigma, w, flags)


def block_auxive(x, cfg: AlgoConfig = AlgoConfig(), pilot: Optional[PilotSignal] = None,
                 name: str = "block_auxive") -> ExtractionResult:
    """
    Block AuxIVE, optionally piloted. Runs exactly max_iter iterations unless
    cfg.early_stop is set; `converged` reports whether the last relative change
    of w fell under early_stop_tol.
    """
    t0 = time.perf_counter()
    coeffs = _check_input(x)
    cfg.validate(coeffs.shape[2])
    blocks = block_covariances(coeffs, cfg.n_blocks)
    flags: List[str] = []
    w = normalize_first(initial_vectors(cfg.init, x), flags)
    max_iter = cfg.max_iter or config.AUX_ITERATIONS

    if pilot is not None:
        pilot.check_frames(coeffs.shape[1])
        r0 = frame_norms(w, coeffs)
        pilot = pilot.scaled_to(float(np.sqrt(np.mean(r0 ** 2))))

    logger.info(f"[AUXIVE] {name}: K={coeffs.shape[0]} N={coeffs.shape[1]} d={coeffs.shape[2]} "
                f"T={blocks.n_blocks} pilot={'yes' if pilot is not None else 'no'}")
    rows = []
    change = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w_new = block_auxive_step(w, coeffs, blocks, pilot, flags)
        change = float(np.max(np.linalg.norm(w_new - w, axis=1) / np.linalg.norm(w, axis=1)))
        w = w_new

        row = {"iteration": it, "contrast": np.nan, "w_change": change}
        if cfg.track_contrast:
            current = coupled_state(w, blocks, flags)
            row["contrast"] = contrast(current, coeffs, blocks)
        rows.append(row)

        if cfg.early_stop and change < cfg.early_stop_tol:
            break
    converged = change < cfg.early_stop_tol

    return _finish(name, x, coeffs, w, blocks, flags, rows, converged, it, cfg, t0)


# ----------------------------------------------------------------------
# Output
# ----------------------------------------------------------------------

def rescale_output(state: ExtractionState, x, ref: int = config.REFERENCE_CHANNEL,
                   blocks: Optional[BlockCovariances] = None) -> np.ndarray:
    """
    SOI image at microphone `ref`: (w_k^H x_{k,l}) * (a_{k,t})_ref per block.
    Works for any component sharing the mixture's framing (evaluation images).
    """
    coeffs = coeffs_of(x)
    n_frames = coeffs.shape[1]
    if blocks is None:
        labels = np.repeat(np.arange(state.a.shape[1]), np.diff(block_bounds(n_frames, state.a.shape[1])))
    else:
        labels = blocks.labels
    return soi_estimates(state.w, coeffs) * state.a[:, labels, ref]


def apply_filter(state: ExtractionState, component: SpectralTensor,
                 ref: int = config.REFERENCE_CHANNEL) -> SpectralTensor:
    """Final rescaled filter applied to one ground-truth component, single-channel result."""
    return component.with_coeffs(rescale_output(state, component, ref)[:, :, None])


def reference_filter(state: ExtractionState, ref: int = config.REFERENCE_CHANNEL) -> np.ndarray:
    """One filter per bin, f_k = w_k (mean_t a_{k,t,ref})^*, so that f_k^H x = s_hat * a_ref."""
    return state.w * np.conj(state.a[:, :, ref].mean(axis=1))[:, None]


def extract_signal(result: ExtractionResult, x: SpectralTensor) -> Waveform:
    return synthesize(x.with_coeffs(result.output[:, :, None]))


def _finish(name, x, coeffs, w, blocks, flags, rows, converged, n_iter, cfg, t0) -> ExtractionResult:
    state = ogc_state(w, blocks, strict=False)
    state.flags = flags
    state.iteration = n_iter
    trace = pd.DataFrame(rows)
    state.contrast_trace = trace["contrast"].tolist() if len(trace) else []
    output = rescale_output(state, coeffs, cfg.reference_channel, blocks)

    result = ExtractionResult(
        algorithm=name,
        state=state,
        output=output,
        trace=trace,
        converged=converged,
        n_iter=n_iter,
        wall_time=0.0,
    )
    if isinstance(x, SpectralTensor) and x.can_synthesize:
        result.extracted = extract_signal(result, x)
    result.wall_time = time.perf_counter() - t0

    status = "✅ converged" if converged else "⚠️ stopped at max_iter"
    logger.info(f"[{name.upper()}] {status} after {n_iter} iterations ({result.wall_time:.2f}s)")
    return result


# ----------------------------------------------------------------------
# Registry
# ----------------------------------------------------------------------

def _static(runner: Callable) -> Callable:
    def run(x, cfg, pilot=None, name=None):
        return runner(x, replace(cfg, n_blocks=1), pilot=pilot, name=name)
    return run


def _gradient(x, cfg, pilot=None, name=None):
    if pilot is not None:
        logger.warning("[BOGIVE] pilot ignored by the gradient algorithm")
    return bogive_w(x, cfg, name=name or "bogive_w")


def _auxiliary(x, cfg, pilot=None, name=None):
    return block_auxive(x, cfg, pilot=pilot, name=name or "block_auxive")


def _piloted(runner: Callable) -> Callable:
    def run(x, cfg, pilot=None, name=None):
        if pilot is None:
            raise ConfigError(f"'{name}' needs a pilot", field="algorithm.pilot")
        return runner(x, cfg, pilot=pilot, name=name)
    return run


ALGORITHMS: Dict[str, Callable] = {
    "bogive_w": _gradient,
    "ogive_w": _static(_gradient),
    "block_auxive": _auxiliary,
    "overiva": _static(_auxiliary),
    "piloted_block_auxive": _piloted(_auxiliary),
    "piloted_overiva": _piloted(_static(_auxiliary)),
}


class ExtractionEngine:
    """Dispatches a named algorithm; the name lands in the result and its trace."""

    def __init__(self, algorithms: Optional[Dict[str, Callable]] = None):
        self.algorithms = algorithms or ALGORITHMS

    def available(self) -> List[str]:
        return sorted(self.algorithms)

    def run(self, name: str, x, cfg: Optional[AlgoConfig] = None,
            pilot: Optional[PilotSignal] = None) -> ExtractionResult:
        if name not in self.algorithms:
            raise ConfigError(f"unknown algorithm '{name}' (available: {', '.join(self.available())})",
                              field="algorithm.name")
        return self.algorithms[name](x, cfg or AlgoConfig(), pilot=pilot, name=name)
