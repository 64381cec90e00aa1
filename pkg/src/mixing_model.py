"""
Mixing Model
============
Block-wise constant-separating-vector (CSV) mixing model.

Per frequency bin k the separating vector w_k = [beta; h] is shared by all
blocks t, while the mixing vector a_{k,t} = [gamma; g] may change from block
to block. a is never a free parameter: it is tied to w through the
orthogonal constraint (OGC)

    a_{k,t} = C_{k,t} w_k / (w_k^H C_{k,t} w_k)

Shapes used throughout:
    x      (K, N, d)      mixture STFT
    w      (K, d)         SeparatingVectors
    a      (K, T, d)      MixingVectors
    sigma  (K, T)         BlockScales, sqrt(w^H C w)
    C      (K, T, d, d)   block sample covariances
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from loguru import logger

import config
from extraction_errors import DegenerateCovariance, SingularParameterization, TooManyBlocks

SeparatingVectors = np.ndarray
MixingVectors = np.ndarray
BlockScales = np.ndarray


def coeffs_of(x) -> np.ndarray:
    """Accept a SpectralTensor or a raw (K, N, d) array."""
    return x.coeffs if hasattr(x, "coeffs") else np.asarray(x)


@dataclass
class BlockCovariances:
    C: np.ndarray
    bounds: np.ndarray      # (T+1,) frame edges, last block absorbs the remainder
    block_len: int

    @property
    def n_blocks(self) -> int:
        return self.C.shape[1]

    @property
    def n_frames(self) -> int:
        return int(self.bounds[-1])

    @property
    def labels(self) -> np.ndarray:
        """Block index of every frame."""
        return np.repeat(np.arange(self.n_blocks), np.diff(self.bounds))

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.bounds)

    def slices(self) -> List[slice]:
        return [slice(int(self.bounds[t]), int(self.bounds[t + 1])) for t in range(self.n_blocks)]


@dataclass
class ExtractionState:
    w: SeparatingVectors
    a: MixingVectors
    sigma: BlockScales
    iteration: int = 0
    contrast_trace: List[float] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    @property
    def n_bins(self) -> int:
        return self.w.shape[0]

    @property
    def n_channels(self) -> int:
        return self.w.shape[1]

    @property
    def active(self) -> np.ndarray:
        """(K, T) mask of the (bin, block) pairs with w^H C w > 0."""
        return self.sigma > 0

    def safe_sigma(self) -> np.ndarray:
        return np.where(self.active, self.sigma, 1.0)

    def flag(self, message: str) -> None:
        if message not in self.flags:
            self.flags.append(message)
            logger.warning(f"[MODEL] {message}")


@dataclass
class AuxiliaryMatrices:
    """Weighted covariances V_{k,t} = E_t[phi(r) x x^H] and the frame norms r they were built from."""
    V: np.ndarray       # (K, T, d, d)
    r: np.ndarray       # (N,)


def block_bounds(n_frames: int, n_blocks: int) -> np.ndarray:
    if n_blocks < 1:
        raise TooManyBlocks(f"need at least one block, got {n_blocks}")
    if n_blocks > n_frames:
        raise TooManyBlocks(f"{n_blocks} blocks for {n_frames} frames")
    block_len = n_frames // n_blocks
    bounds = np.arange(n_blocks + 1) * block_len
    bounds[-1] = n_frames
    return bounds


def block_covariances(x, n_blocks: int) -> BlockCovariances:
    """C_{k,t} = (1/N_t) sum_{l in block t} x_{k,l} x_{k,l}^H."""
    coeffs = coeffs_of(x)
    n_bins, n_frames, d = coeffs.shape
    bounds = block_bounds(n_frames, n_blocks)

    C = np.empty((n_bins, n_blocks, d, d), dtype=np.complex128)
    for t in range(n_blocks):
        blk = coeffs[:, bounds[t]:bounds[t + 1], :]
        C[:, t] = np.einsum("knd,kne->kde", blk, blk.conj()) / blk.shape[1]

    block_len = n_frames // n_blocks
    if block_len < d:
        logger.warning(f"[MODEL] block length {block_len} < {d} channels: block covariances are rank deficient")
    return BlockCovariances(C=C, bounds=bounds, block_len=block_len)


def ogc_mixing_vector(w: np.ndarray, C: np.ndarray, strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    OGC coupling a = C w / (w^H C w), batched over leading axes.

    Returns (a, sigma) with sigma = sqrt(w^H C w). With strict=False a
    vanishing denominator yields a = 0 instead of DegenerateCovariance.
    """
    Cw = np.einsum("...de,...e->...d", C, w)
    den = np.real(np.einsum("...d,...d->...", w.conj(), Cw))
    tr = np.real(np.trace(C, axis1=-2, axis2=-1))
    bad = den <= config.EPS_DEN * tr
    if np.any(bad):
        if strict:
            raise DegenerateCovariance(f"w^H C w vanishes for {int(np.sum(bad))} (bin, block) pairs")
    safe = np.where(bad, 1.0, den)
    a = np.where(bad[..., None], 0.0, Cw / safe[..., None])
    sigma = np.sqrt(np.where(bad, 0.0, den))
    return a, sigma


def ogc_state(w: np.ndarray, blocks: BlockCovariances, strict: bool = True) -> ExtractionState:
    a, sigma = ogc_mixing_vector(w[:, None, :], blocks.C, strict=strict)
    return ExtractionState(w=w, a=a, sigma=sigma)


def blocking_matrix(a: np.ndarray) -> np.ndarray:
    """B = [g, -gamma I] of shape (..., d-1, d); B a = 0."""
    a = np.asarray(a)
    d = a.shape[-1]
    gamma = a[..., 0]
    B = np.zeros(a.shape[:-1] + (d - 1, d), dtype=np.complex128)
    B[..., :, 0] = a[..., 1:]
    B[..., :, 1:] = -gamma[..., None, None] * np.eye(d - 1)
    return B


def build_mixing_matrix(a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """
    A = [[gamma, h^H], [g, (g h^H - I) / gamma]], batched over leading axes.
    The columns after the first span the background subspace.
    """
    a = np.asarray(a)
    h = np.asarray(h)
    gamma = a[..., 0]
    if np.any(np.abs(gamma) < np.finfo(float).tiny):
        raise SingularParameterization("gamma = 0: the mixing matrix is not defined")
    g = a[..., 1:]
    d = a.shape[-1]

    A = np.empty(a.shape[:-1] + (d, d), dtype=np.complex128)
    A[..., 0, 0] = gamma
    A[..., 0, 1:] = h.conj()
    A[..., 1:, 0] = g
    outer = g[..., :, None] * h.conj()[..., None, :]
    A[..., 1:, 1:] = (outer - np.eye(d - 1)) / gamma[..., None, None]
    return A


def build_demixing_matrix(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """W = [w^H; B]. Its inverse is A when w^H a = 1."""
    w = np.asarray(w)
    a = np.asarray(a)
    B = blocking_matrix(a)
    w_row = np.broadcast_to(w.conj(), a.shape)[..., None, :]
    return np.concatenate([w_row, B], axis=-2)


def soi_estimates(w: np.ndarray, x) -> np.ndarray:
    """s_hat_{k,l} = w_k^H x_{k,l}, shape (K, N)."""
    return np.einsum("kd,knd->kn", w.conj(), coeffs_of(x))


def _per_block_mean(values: np.ndarray, blocks: BlockCovariances) -> np.ndarray:
    """Mean over the frames of each block along the last axis."""
    return np.stack([values[..., sl].mean(axis=-1) for sl in blocks.slices()], axis=-1)


def _background_term(state: ExtractionState, blocks: BlockCovariances) -> np.ndarray:
    """
    E_t[z^H C_z^{-1} z] with z = B x, evaluated through the trace identity
    tr(C_z^{-1} B C B^H). Equals d-1 unless C_z needed the ridge, 0 on
    inactive pairs.
    """
    d = state.n_channels
    active = state.active
    B = blocking_matrix(state.a)                                      # (K,T,d-1,d)
    Cz = B @ blocks.C @ np.conj(np.swapaxes(B, -1, -2))               # (K,T,d-1,d-1)
    Cz = np.where(active[..., None, None], Cz, np.eye(d - 1))
    tr = np.real(np.trace(Cz, axis1=-2, axis2=-1))
    eigmin = np.linalg.eigvalsh(Cz)[..., 0]
    singular = eigmin <= config.EPS_REG * tr
    if np.any(singular):
        state.flag(f"ridge: background covariance singular in {int(np.sum(singular))} (bin, block) pairs")
    ridge = np.where(singular, config.EPS_REG * tr / (d - 1), 0.0)
    Cz_reg = Cz + ridge[..., None, None] * np.eye(d - 1)
    value = np.real(np.trace(np.linalg.solve(Cz_reg, Cz), axis1=-2, axis2=-1))
    return np.where(active, value, 0.0)


def _block_terms(state: ExtractionState, blocks: BlockCovariances) -> np.ndarray:
    """
    -log sigma^2 - E[z^H C_z^-1 z] + (d-2) log|gamma|^2, summed over the
    active bins, per block.
    """
    d = state.n_channels
    active = state.active
    log_sigma2 = np.log(state.safe_sigma() ** 2)
    background = _background_term(state, blocks)
    if d > 2:
        gamma2 = np.abs(state.a[..., 0]) ** 2
        log_gamma2 = np.log(np.where(active, gamma2, 1.0))
    else:
        log_gamma2 = np.zeros_like(log_sigma2)
    terms = -log_sigma2 - background + (d - 2) * log_gamma2
    return np.sum(np.where(active, terms, 0.0), axis=0)


def normalized_estimates(state: ExtractionState, x, blocks: BlockCovariances) -> np.ndarray:
    """s_tilde = s_hat / sigma per block, zero on inactive (bin, block) pairs."""
    labels = blocks.labels
    s = soi_estimates(state.w, x) / state.safe_sigma()[:, labels]
    return np.where(state.active[:, labels], s, 0.0)


def contrast(state: ExtractionState, x, blocks: BlockCovariances) -> float:
    """
    Normalized log-likelihood contrast

        C = 1/T sum_t { E_t[log f(s_hat / sigma_t)] - sum_k log sigma_{k,t}^2
                        - sum_k E_t[z^H C_z^{-1} z] + (d-2) sum_k log|gamma_{k,t}|^2 }

    with the vector-Laplace log f(s) = -||s|| (additive constants dropped).
    """
    s_tilde = normalized_estimates(state, x, blocks)
    log_f = -np.linalg.norm(s_tilde, axis=0)                          # (N,)
    per_block = _per_block_mean(log_f, blocks) + _block_terms(state, blocks)
    return float(np.mean(per_block))


def auxiliary_value(state: ExtractionState, aux: AuxiliaryMatrices, x, blocks: BlockCovariances) -> float:
    """
    Auxiliary function Q(w, V) of the contrast.

    The prior term is replaced by its quadratic minorant
        -1/2 sum_k w^H V w / sigma^2 + R_t,   R_t = -1/2 E_t[r],
    which touches log f at r_l = ||s_tilde_l||; there Q = C, elsewhere Q <= C.
    """
    w = state.w
    quad = np.real(np.einsum("kd,ktde,ke->kt", w.conj(), aux.V, w)) / state.safe_sigma() ** 2
    quad = np.where(state.active, quad, 0.0)
    R = -0.5 * _per_block_mean(aux.r, blocks)
    per_block = -0.5 * np.sum(quad, axis=0) + R + _block_terms(state, blocks)
    return float(np.mean(per_block))
