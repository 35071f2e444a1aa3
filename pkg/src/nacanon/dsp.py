"""Audio frontend: PCM16 WAV I/O, framing, log-mel features and F0 tracking.

Everything here is a pure function of its inputs.  Frame ``i`` always covers
samples ``[i * hop, i * hop + frame_len)`` so every analysis in the package
agrees on ``T = 1 + (num_samples - frame_len) // hop``.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
F0_MIN_HZ = 50.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.5
RMS_GATE = 1e-4
OCTAVE_COST = 0.2


class WavFormatError(ValueError):
    """Raised when a file is not a well-formed RIFF/WAVE container."""


class UnsupportedFormatError(WavFormatError):
    """Raised for valid WAV files that are not 16-bit mono PCM."""


class TooShortError(ValueError):
    """Raised when a waveform holds fewer samples than a single frame."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FrameSpec:
    frame_len: int
    hop: int
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_len:
            raise ValueError(f"need 0 < hop <= frame_len, got hop={self.hop} frame_len={self.frame_len}")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_len:
            return 0
        return 1 + (num_samples - self.frame_len) // self.hop

    def num_samples(self, num_frames: int) -> int:
        """Length of an overlap-added signal of ``num_frames`` frames."""
        return (num_frames - 1) * self.hop + self.frame_len

    def window_array(self) -> np.ndarray:
        if self.window == "rect":
            return np.ones(self.frame_len)
        # periodic Hann: sums to one at 50 % overlap
        n = np.arange(self.frame_len)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.frame_len)


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_spec: FrameSpec

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class F0Curve:
    """Per-frame F0 in Hz; unvoiced frames hold ``nan``."""

    f0_hz: np.ndarray
    frame_spec: FrameSpec

    @property
    def voiced(self) -> np.ndarray:
        return np.isfinite(self.f0_hz)

    def __len__(self) -> int:
        return self.f0_hz.shape[0]


# ---------------------------------------------------------------- WAV I/O


def read_wav(path) -> Waveform:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: {channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(waveform: Waveform, path) -> None:
    pcm = to_pcm16(waveform.samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(waveform.sample_rate_hz))
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- framing


def frame_signal(samples: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """Return a ``(T, frame_len)`` view of the framed signal (no window)."""
    n = spec.num_frames(len(samples))
    if n == 0:
        raise TooShortError(f"{len(samples)} samples is shorter than one frame of {spec.frame_len}")
    idx = np.arange(spec.frame_len)[None, :] + spec.hop * np.arange(n)[:, None]
    return np.asarray(samples)[idx]


def next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the ``n_fft // 2 + 1`` rfft bins, shape ``(n_mels, bins)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_features(waveform: Waveform, spec: FrameSpec, n_mels: int) -> FeatureMatrix:
    """Log-mel energies plus one log-F0 channel (0 on unvoiced frames)."""
    frames = frame_signal(waveform.samples, spec)
    n_fft = next_pow2(spec.frame_len)
    power = np.abs(np.fft.rfft(frames * spec.window_array(), n=n_fft, axis=1)) ** 2
    fbank = power @ mel_filterbank(n_mels, n_fft, waveform.sample_rate_hz).T
    logmel = np.log(np.maximum(fbank, LOG_FLOOR))
    f0 = estimate_f0(waveform, spec).f0_hz
    logf0 = np.where(np.isfinite(f0), np.log(np.where(np.isfinite(f0), f0, 1.0)), 0.0)
    return FeatureMatrix(np.concatenate([logmel, logf0[:, None]], axis=1), spec)


# ---------------------------------------------------------------- F0


def lag_range(sample_rate: int, frame_len: int) -> tuple[int, int]:
    lo = int(np.floor(sample_rate / F0_MAX_HZ))
    hi = int(np.ceil(sample_rate / F0_MIN_HZ))
    return max(lo, 1), min(hi, frame_len - 1)


def normalized_autocorrelation(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """``r[i, k] = <x[:-k], x[k:]> / sqrt(|x[:-k]|^2 |x[k:]|^2)`` for lags ``0..max_lag``."""
    n = frames.shape[1]
    nfft = next_pow2(2 * n)
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, : max_lag + 1]
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    head = sq[:, n - lags]  # energy of x[:n-k]
    tail = sq[:, n][:, None] - sq[:, lags]  # energy of x[k:]
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-20, acf / denom, 0.0)
    return r


def _pick_lag(r: np.ndarray, lo: int, hi: int) -> tuple[float, float]:
    """Best lag of one normalized autocorrelation row, refined parabolically.

    Candidates are scored with a small per-octave cost on long lags, and the
    shortest local maximum within 0.9 of the best score wins.  Long lags see
    little overlap and would otherwise pull estimates an octave down.
    """
    lags = np.arange(lo, hi + 1)
    seg = r[lo : hi + 1]
    score = seg - OCTAVE_COST * np.log2(lags / lo)
    best = score.max()
    k = int(score.argmax())
    if best > 0:
        for j in range(1, len(seg) - 1):
            if score[j] >= 0.9 * best and seg[j] >= seg[j - 1] and seg[j] >= seg[j + 1]:
                k = j
                break
    lag = lo + k
    if lo < lag < hi:
        a, b, c = r[lag - 1], r[lag], r[lag + 1]
        curv = a - 2 * b + c
        if curv < 0:
            shift = 0.5 * (a - c) / curv
            return lag + shift, float(b - 0.25 * (a - c) * shift)
    return float(lag), float(r[lag])


def estimate_f0(waveform: Waveform, spec: FrameSpec) -> F0Curve:
    """Per-frame F0 from the normalized autocorrelation of each frame.

    A frame is voiced when its RMS reaches ``RMS_GATE`` and the
    chosen autocorrelation peak reaches ``VOICING_THRESHOLD``.
    """
    frames = frame_signal(waveform.samples, spec)
    lo, hi = lag_range(waveform.sample_rate_hz, spec.frame_len)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    r = normalized_autocorrelation(frames, hi)
    f0 = np.full(frames.shape[0], np.nan)
    for i in range(frames.shape[0]):
        if rms[i] < RMS_GATE:
            continue
        lag, value = _pick_lag(r[i], lo, hi)
        if value >= VOICING_THRESHOLD:
            f0[i] = np.clip(waveform.sample_rate_hz / lag, F0_MIN_HZ, F0_MAX_HZ)
    return F0Curve(f0, spec)


# ---------------------------------------------------------------- synthesis


def cepstral_envelope(cepstrum: np.ndarray, n_fft: int) -> np.ndarray:
    """Log-magnitude envelope on the rfft grid from coefficients ``c1..cL`` (rows = frames)."""
    cepstrum = np.atleast_2d(cepstrum)
    k = np.arange(1, cepstrum.shape[1] + 1)
    bins = np.arange(n_fft // 2 + 1)
    basis = 2.0 * np.cos(2 * np.pi * np.outer(k, bins) / n_fft)
    return cepstrum @ basis


def overlap_add_source_filter(
    f0_hz: np.ndarray,
    log_envelope: np.ndarray,
    rms: np.ndarray,
    spec: FrameSpec,
    sample_rate: int,
    noise_seed: int = 0,
) -> np.ndarray:
    """Frame-wise source-filter synthesis with windowed overlap-add.

    ``f0_hz`` is per frame (``nan`` or ``<= 0`` means unvoiced), ``log_envelope``
    holds natural-log magnitudes on the rfft grid of ``next_pow2(frame_len)``,
    and each frame is scaled to the requested RMS before windowing.  Voiced
    frames are harmonic series band-limited at Nyquist that share one
    continuous phase track, so overlapping frames never cancel; unvoiced
    frames are envelope-shaped noise.
    """
    n_frames = len(f0_hz)
    n_fft = next_pow2(spec.frame_len)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    window = spec.window_array()
    out = np.zeros(spec.num_samples(n_frames))
    phase = _phase_track(f0_hz, spec, sample_rate, len(out))
    rng = np.random.default_rng(noise_seed)
    for m in range(n_frames):
        f0 = f0_hz[m]
        start = m * spec.hop
        if np.isfinite(f0) and f0 > 0:
            k = np.arange(1, int((sample_rate / 2) // f0) + 1)
            amp = np.exp(np.interp(k * f0, freqs, log_envelope[m]))
            frame = amp @ np.cos(np.outer(k, phase[start : start + spec.frame_len]))
        else:
            noise = np.fft.rfft(rng.standard_normal(n_fft))
            frame = np.fft.irfft(noise * np.exp(log_envelope[m]), n=n_fft)[: spec.frame_len]
        level = np.sqrt(np.mean(frame**2))
        if level > 0:
            frame = frame * (rms[m] / level)
        out[start : start + spec.frame_len] += frame * window
    return out


def _phase_track(f0_hz, spec: FrameSpec, sample_rate: int, n_samples: int) -> np.ndarray:
    """Fundamental phase per sample from log-F0 interpolated between frame centres."""
    voiced = np.isfinite(f0_hz) & (np.nan_to_num(f0_hz) > 0)
    if not voiced.any():
        return np.zeros(n_samples)
    centres = np.arange(len(f0_hz)) * spec.hop + spec.frame_len / 2
    log_f0 = np.interp(np.arange(n_samples), centres[voiced], np.log(f0_hz[voiced]))
    return 2 * np.pi * np.cumsum(np.exp(log_f0)) / sample_rate
