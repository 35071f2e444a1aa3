"""Residual-vector-quantization audio codec.

Waveforms are analysed into per-frame vectors ``[log RMS, log F0, c1..cL]``
(``log F0`` is 0 on unvoiced frames, ``c`` is the real cepstrum of the
spectral envelope; on voiced frames the envelope is read off the harmonic
peaks so the valleys between harmonics do not drag it down), quantized
by ``Q`` stacked codebooks, and resynthesized with a harmonic/noise source
shaped by the cepstral envelope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import f32_round, read_container, write_container
from .dsp import (
    LOG_FLOOR,
    FeatureMatrix,
    FrameSpec,
    Waveform,
    cepstral_envelope,
    estimate_f0,
    frame_signal,
    next_pow2,
    overlap_add_source_filter,
)
from .kmeans import InsufficientDataError, kmeans, nearest

MAGIC = b"NACQ"
# reconstructed log-F0 below this is treated as unvoiced (exp(2) ~ 7 Hz, far below F0_MIN_HZ)
VOICED_LOG_F0 = 2.0


class ModelMismatchError(ValueError):
    """Raised when data does not match the dimensions of a trained model."""


class TokenRangeError(ValueError):
    pass


@dataclass
class AcousticTokens:
    grid: np.ndarray
    n_q: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.grid.ndim != 2:
            raise ValueError("acoustic token grid must be 2-D (Q x T_A)")
        if self.grid.size and (self.grid.min() < 0 or self.grid.max() >= self.n_q):
            raise TokenRangeError(f"token outside [0, {self.n_q})")

    @property
    def q(self) -> int:
        return self.grid.shape[0]

    @property
    def num_frames(self) -> int:
        return self.grid.shape[1]

    def rows(self, n: int) -> "AcousticTokens":
        return AcousticTokens(self.grid[:n], self.n_q)

    def frames(self, start: int, stop: int) -> "AcousticTokens":
        return AcousticTokens(self.grid[:, start:stop], self.n_q)


def harmonic_log_envelope(log_mag: np.ndarray, f0_hz: float, freqs: np.ndarray) -> np.ndarray:
    """Log envelope through the harmonic peaks of one voiced frame.

    Each harmonic ``k`` owns the band ``[(k - 1/2) f0, (k + 1/2) f0)``; its peak
    log magnitude is taken as the envelope value at ``k f0`` and the values are
    linearly interpolated over the rfft grid.
    """
    k_max = int(freqs[-1] // f0_hz)
    if k_max < 1:
        return log_mag
    edges = np.searchsorted(freqs, (np.arange(1, k_max + 2) - 0.5) * f0_hz)
    edges[-1] = min(edges[-1], len(freqs))
    peaks = np.maximum.reduceat(log_mag[: edges[-1]], edges[:-1])
    return np.interp(freqs, np.arange(1, k_max + 1) * f0_hz, peaks)


def acoustic_frame_vectors(waveform: Waveform, spec: FrameSpec = FrameSpec(640, 320), n_cepstra: int = 20) -> FeatureMatrix:
    frames = frame_signal(waveform.samples, spec)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    log_e = np.log(np.maximum(rms, LOG_FLOOR))
    f0 = estimate_f0(waveform, spec).f0_hz
    log_f0 = np.log(np.where(np.isfinite(f0), f0, 1.0))
    n_fft = next_pow2(spec.frame_len)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / waveform.sample_rate_hz)
    log_mag = np.log(np.maximum(np.abs(np.fft.rfft(frames * spec.window_array(), n=n_fft, axis=1)), LOG_FLOOR))
    for i in np.flatnonzero(np.isfinite(f0)):
        log_mag[i] = harmonic_log_envelope(log_mag[i], f0[i], freqs)
    cep = np.fft.irfft(log_mag, n=n_fft, axis=1)[:, 1 : n_cepstra + 1]
    return FeatureMatrix(np.column_stack([log_e, log_f0, cep]), spec)


def quantize_residual(vector: np.ndarray, codebook: np.ndarray) -> tuple:
    """Nearest codeword (lowest index on ties) and the remaining residual."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape[-1] != codebook.shape[1]:
        raise ModelMismatchError(f"vector dimension {vector.shape[-1]} != codebook dimension {codebook.shape[1]}")
    idx = int(nearest(vector[None, :], codebook)[0])
    return idx, vector - codebook[idx]


@dataclass
class RvqStack:
    codebooks: list
    q_coarse: int
    spec: FrameSpec = FrameSpec(640, 320)
    n_cepstra: int = 20
    sample_rate: int = 16000

    def __post_init__(self):
        if not self.codebooks:
            raise ValueError("need at least one codebook")
        dims = {cb.shape for cb in self.codebooks}
        if len(dims) != 1:
            raise ValueError("all codebooks must share one shape")
        if not 1 <= self.q_coarse < max(self.q, 2):
            raise ValueError(f"q_coarse must lie in [1, Q), got {self.q_coarse}")

    @property
    def q(self) -> int:
        return len(self.codebooks)

    @property
    def n_q(self) -> int:
        return self.codebooks[0].shape[0]

    @property
    def dim(self) -> int:
        return self.codebooks[0].shape[1]

    def quantize(self, vectors: np.ndarray) -> np.ndarray:
        """Token grid ``(Q, T)`` for a ``(T, D)`` matrix of frame vectors."""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self.dim:
            raise ModelMismatchError(f"frame dimension {vectors.shape[1]} != model dimension {self.dim}")
        residual = vectors.copy()
        grid = np.empty((self.q, len(vectors)), dtype=np.int64)
        for level, cb in enumerate(self.codebooks):
            grid[level] = nearest(residual, cb)
            residual -= cb[grid[level]]
        return grid

    def reconstruct(self, grid: np.ndarray, levels: int | None = None) -> np.ndarray:
        """Sum of codewords over the first ``levels`` rows, shape ``(T, D)``."""
        grid = np.asarray(grid)
        levels = grid.shape[0] if levels is None else levels
        out = np.zeros((grid.shape[1], self.dim))
        for level in range(levels):
            out += self.codebooks[level][grid[level]]
        return out

    def save(self, path) -> None:
        meta = {
            "q": self.q,
            "n_q": self.n_q,
            "dim": self.dim,
            "q_coarse": self.q_coarse,
            "frame_len": self.spec.frame_len,
            "hop": self.spec.hop,
            "n_cepstra": self.n_cepstra,
            "sample_rate": self.sample_rate,
        }
        write_container(path, MAGIC, meta, {"codebooks": np.stack(self.codebooks)})

    @classmethod
    def load(cls, path) -> "RvqStack":
        meta, tensors = read_container(path, MAGIC)
        books = tensors["codebooks"]
        return cls(
            [books[i] for i in range(books.shape[0])],
            int(meta["q_coarse"]),
            FrameSpec(int(meta["frame_len"]), int(meta["hop"])),
            int(meta["n_cepstra"]),
            int(meta["sample_rate"]),
        )


def train_rvq(features, q: int, n_q: int, seed: int, q_coarse: int = 2, max_iter: int = 50, tol: float = 1e-6,
              spec: FrameSpec = FrameSpec(640, 320), n_cepstra: int = 20, sample_rate: int = 16000) -> RvqStack:
    """Stage-wise k-means: stage ``q`` clusters the residuals left by stages ``< q``.

    ``features`` is a ``(N, D)`` array or a list of ``FeatureMatrix``.
    Codewords are rounded to float32 as they are learned so the stack
    behaves identically before and after a save/load round trip.
    """
    x = _stack(features)
    if len(x) < n_q:
        raise InsufficientDataError(f"{len(x)} frames cannot train {n_q} codewords")
    residual = x.copy()
    books = []
    for level in range(q):
        cb = f32_round(kmeans(residual, n_q, seed=[seed, level], max_iter=max_iter, tol=tol))
        residual -= cb[nearest(residual, cb)]
        books.append(cb)
    return RvqStack(books, q_coarse if q > 1 else max(1, q_coarse), spec, n_cepstra, sample_rate)


def _stack(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    return np.concatenate([f.frames if isinstance(f, FeatureMatrix) else np.asarray(f) for f in features], axis=0)


def encode(waveform: Waveform, rvq: RvqStack) -> AcousticTokens:
    vectors = acoustic_frame_vectors(waveform, rvq.spec, rvq.n_cepstra).frames
    return AcousticTokens(rvq.quantize(vectors), rvq.n_q)


def synthesize_vectors(vectors: np.ndarray, rvq: RvqStack) -> Waveform:
    """Render frame vectors ``[log RMS, log F0, c1..cL]`` to a waveform."""
    vectors = np.atleast_2d(vectors)
    log_f0 = vectors[:, 1]
    f0 = np.where(log_f0 > VOICED_LOG_F0, np.exp(np.clip(log_f0, np.log(50.0), np.log(500.0))), np.nan)
    n_fft = next_pow2(rvq.spec.frame_len)
    envelope = cepstral_envelope(vectors[:, 2:], n_fft)
    rms = np.exp(np.clip(vectors[:, 0], np.log(LOG_FLOOR), 0.0))
    samples = overlap_add_source_filter(f0, envelope, rms, rvq.spec, rvq.sample_rate, noise_seed=0)
    return Waveform(np.clip(samples, -1.0, 1.0), rvq.sample_rate)


def decode(tokens: AcousticTokens, rvq: RvqStack, levels: int | None = None) -> Waveform:
    grid = tokens.grid
    if grid.shape[0] != rvq.q:
        raise ModelMismatchError(f"token grid has {grid.shape[0]} rows, model has {rvq.q} codebooks")
    if grid.size and (grid.min() < 0 or grid.max() >= rvq.n_q):
        raise TokenRangeError(f"token outside [0, {rvq.n_q})")
    return synthesize_vectors(rvq.reconstruct(grid, levels), rvq)
