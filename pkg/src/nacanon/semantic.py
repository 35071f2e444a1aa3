"""Semantic encoder: speaker-normalized frame features quantized by one codebook."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, idct

from .container import f32_round, read_container, write_container
from .dsp import FrameSpec, Waveform, frame_features
from .kmeans import InsufficientDataError, kmeans, nearest

MAGIC = b"SEMQ"


class ModelMismatchError(ValueError):
    pass


@dataclass
class SemanticTokens:
    tokens: np.ndarray
    n_s: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.n_s):
            raise ValueError(f"semantic token outside [0, {self.n_s})")

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class SemanticCodebook:
    centroids: np.ndarray
    spec: FrameSpec = FrameSpec(400, 320)
    n_mels: int = 24
    lifter: int = 6
    f0_weight: float = 1.0

    def __post_init__(self):
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValueError("centroids must be a non-empty 2-D array")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def n_s(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        meta = {
            "n_s": self.n_s,
            "dim": self.dim,
            "frame_len": self.spec.frame_len,
            "hop": self.spec.hop,
            "n_mels": self.n_mels,
            "lifter": self.lifter,
            "f0_weight": repr(float(self.f0_weight)),
        }
        write_container(path, MAGIC, meta, {"centroids": self.centroids})

    @classmethod
    def load(cls, path) -> "SemanticCodebook":
        meta, tensors = read_container(path, MAGIC)
        return cls(
            tensors["centroids"],
            FrameSpec(int(meta["frame_len"]), int(meta["hop"])),
            int(meta["n_mels"]),
            int(meta["lifter"]),
            float(meta["f0_weight"]),
        )


def normalize_features(frames: np.ndarray, lifter: int = 6, f0_weight: float = 1.0) -> np.ndarray:
    """Per-utterance normalization of ``frame_features`` output.

    Log-mel channels are mean-normalized over the utterance, then smoothed
    along frequency by keeping DCT coefficients ``1..lifter-1`` (coefficient
    0, the frame level, is dropped).  The log-F0 channel becomes a z-score
    over voiced frames, scaled by ``f0_weight``; unvoiced frames stay 0.
    Speaker-dependent offsets, tilt and harmonic ripple are largely removed
    while the content-driven spectral shape and pitch contour survive.
    """
    logmel = frames[:, :-1] - frames[:, :-1].mean(axis=0)
    coeffs = dct(logmel, axis=1, norm="ortho")
    coeffs[:, 0] = 0.0
    coeffs[:, lifter:] = 0.0
    smooth = idct(coeffs, axis=1, norm="ortho")
    log_f0 = frames[:, -1]
    voiced = log_f0 > 0
    rel = np.zeros_like(log_f0)
    if voiced.sum() > 1:
        v = log_f0[voiced]
        rel[voiced] = (v - v.mean()) / (v.std() + 1e-3)
    return np.column_stack([smooth, f0_weight * rel])


def semantic_features(waveform: Waveform, spec: FrameSpec = FrameSpec(400, 320), n_mels: int = 24,
                      lifter: int = 6, f0_weight: float = 1.0) -> np.ndarray:
    return normalize_features(frame_features(waveform, spec, n_mels).frames, lifter, f0_weight)


def train_semantic(features, n_s: int, seed: int, max_iter: int = 50, tol: float = 1e-6,
                   spec: FrameSpec = FrameSpec(400, 320), n_mels: int = 24, lifter: int = 6,
                   f0_weight: float = 1.0) -> SemanticCodebook:
    """Single-stage k-means over normalized semantic feature frames (array or list of arrays)."""
    x = features if isinstance(features, np.ndarray) else np.concatenate(list(features), axis=0)
    if len(x) < n_s:
        raise InsufficientDataError(f"{len(x)} frames cannot train {n_s} semantic codewords")
    centroids = f32_round(kmeans(x, n_s, seed=[seed, 101], max_iter=max_iter, tol=tol))
    return SemanticCodebook(centroids, spec, n_mels, lifter, f0_weight)


def tokenize(waveform: Waveform, codebook: SemanticCodebook) -> SemanticTokens:
    x = semantic_features(waveform, codebook.spec, codebook.n_mels, codebook.lifter, codebook.f0_weight)
    return tokenize_features(x, codebook)


def tokenize_features(x: np.ndarray, codebook: SemanticCodebook) -> SemanticTokens:
    if x.shape[1] != codebook.dim:
        raise ModelMismatchError(f"feature dimension {x.shape[1]} != codebook dimension {codebook.dim}")
    return SemanticTokens(nearest(x, codebook.centroids), codebook.n_s)
