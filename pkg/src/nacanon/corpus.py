"""Synthetic multi-speaker corpus with ground-truth speakers, content and F0.

Speakers differ in base F0, pitch-contour depth, spectral tilt, vocal-tract
scale and two speaker-specific resonances (one high, one mid-band).  Content units differ
in formant pattern, loudness and pitch shape; the last two units of the
alphabet are unvoiced (noise-excited).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import Config
from .dsp import FrameSpec, Waveform, next_pow2, overlap_add_source_filter, read_wav, write_wav

N_UNVOICED = 2
MIN_UNIT_FRAMES = 4
MAX_UNIT_FRAMES = 12


@dataclass(frozen=True)
class SpeakerParams:
    speaker_id: str
    base_f0_hz: float
    f0_range: float
    envelope: tuple  # (tilt per octave, vocal-tract scale, hf centre Hz, hf gain, mid centre Hz, mid gain)

    @property
    def tilt(self) -> float:
        return self.envelope[0]

    @property
    def vtl_scale(self) -> float:
        return self.envelope[1]


@dataclass(frozen=True)
class ContentScript:
    units: tuple
    durations: tuple

    def __post_init__(self):
        if len(self.units) == 0 or len(self.units) != len(self.durations):
            raise ValueError("script needs one duration per unit and at least one unit")
        if min(self.durations) < 3:
            raise ValueError("unit durations must be at least 3 frames")

    @property
    def num_frames(self) -> int:
        return int(sum(self.durations))

    def frame_labels(self) -> np.ndarray:
        return np.repeat(np.asarray(self.units, dtype=np.int64), self.durations)


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    waveform: Waveform
    labels: np.ndarray

    def unit_sequence(self) -> list:
        return collapse_runs(self.labels)


def collapse_runs(labels) -> list:
    out = []
    for x in labels:
        if not out or out[-1] != x:
            out.append(int(x))
    return out


def speaker_id(index: int) -> str:
    return f"spk{index:03d}"


def generate_speaker(corpus_seed: int, index: int) -> SpeakerParams:
    rng = np.random.default_rng([corpus_seed, index, 17])
    base = rng.uniform(90.0, 300.0)
    f0_range = rng.uniform(0.06, 0.15)
    tilt = rng.uniform(-0.6, 0.1)
    vtl = rng.uniform(0.92, 1.08)
    hf_centre = rng.uniform(3500.0, 6000.0)
    hf_gain = rng.uniform(0.3, 1.2)
    mid_centre = rng.uniform(700.0, 2800.0)
    mid_gain = rng.uniform(-2.0, 2.0)
    env = (tilt, vtl, hf_centre, hf_gain, mid_centre, mid_gain)
    return SpeakerParams(speaker_id(index), float(base), float(f0_range), tuple(float(x) for x in env))


@dataclass(frozen=True)
class UnitParams:
    formants: tuple
    gain: float
    pitch_offset: float
    pitch_slope: float
    voiced: bool


def unit_table(n_units: int) -> list:
    """Deterministic unit inventory; formants are spread with low-discrepancy sequences."""
    units = []
    n_voiced = max(n_units - N_UNVOICED, 1)
    for u in range(n_units):
        if u < n_voiced:
            a = (u * 0.6180339887 + 0.11) % 1.0
            b = (u * 0.7548776662 + 0.37) % 1.0
            f1 = 280.0 + 620.0 * a
            f2 = max(1000.0 + 1500.0 * b, f1 + 400.0)
            f3 = 2500.0 + 900.0 * ((u * 0.5698402910 + 0.23) % 1.0)
            offset = -1.0 + 2.0 * ((7 * u) % n_voiced) / max(n_voiced - 1, 1)
            slope = np.cos(1.7 * u + 1.1)
            units.append(UnitParams((f1, f2, f3), 0.1, float(offset), float(slope), True))
        else:
            centre = 3000.0 + 2500.0 * (u - n_voiced) / max(N_UNVOICED - 1, 1)
            units.append(UnitParams((centre,), 0.03, 0.0, 0.0, False))
    # centre the pitch offsets so an utterance's median F0 stays near the speaker's base
    mean_offset = float(np.mean([u.pitch_offset for u in units if u.voiced]))
    return [replace(u, pitch_offset=u.pitch_offset - mean_offset) if u.voiced else u for u in units]


def generate_script(rng: np.random.Generator, n_units: int, target_frames: int) -> ContentScript:
    units, durs = [], []
    total = 0
    while total < target_frames:
        choices = [u for u in range(n_units) if not units or u != units[-1]]
        unit = int(rng.choice(choices))
        dur = int(rng.integers(MIN_UNIT_FRAMES, MAX_UNIT_FRAMES + 1))
        units.append(unit)
        durs.append(dur)
        total += dur
    return ContentScript(tuple(units), tuple(durs))


def _log_envelope(freqs, speaker: SpeakerParams, unit: UnitParams) -> np.ndarray:
    tilt, vtl, hf_centre, hf_gain, mid_centre, mid_gain = speaker.envelope
    octaves = np.log2(np.maximum(freqs, 50.0) / 500.0)
    env = tilt * octaves + hf_gain * np.exp(-0.5 * ((freqs - hf_centre) / 500.0) ** 2)
    env = env + mid_gain * np.exp(-0.5 * ((freqs - mid_centre) / 350.0) ** 2)
    if unit.voiced:
        for j, f in enumerate(unit.formants):
            bw = 160.0 + 80.0 * j
            env = env + (3.0 - 0.5 * j) * np.exp(-0.5 * ((freqs - vtl * f) / bw) ** 2)
    else:
        env = env + 1.5 * np.exp(-0.5 * ((freqs - vtl * unit.formants[0]) / 2000.0) ** 2)
    return env


def synthesize_utterance(speaker: SpeakerParams, script: ContentScript, seed: int, n_units: int = 12,
                         spec: FrameSpec = FrameSpec(640, 320), sample_rate: int = 16000) -> tuple:
    """Render ``script`` in the voice of ``speaker``; returns ``(Waveform, per-frame labels)``.

    The waveform has ``(T - 1) * hop + frame_len`` samples where ``T`` is the
    total script duration in frames, and ``labels[t]`` is the unit of frame ``t``.
    """
    table = unit_table(n_units)
    rng = np.random.default_rng([seed, 5])
    labels = script.frame_labels()
    T = len(labels)
    n_fft = next_pow2(spec.frame_len)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)

    shape = np.zeros(T)
    voiced = np.zeros(T, dtype=bool)
    start = 0
    for unit_id, dur in zip(script.units, script.durations):
        unit = table[unit_id]
        tau = (np.arange(dur) + 0.5) / dur
        shape[start:start + dur] = unit.pitch_offset + unit.pitch_slope * (tau - 0.5)
        voiced[start:start + dur] = unit.voiced
        start += dur
    # short glides across unit boundaries
    smooth = np.convolve(np.pad(shape, 1, mode="edge"), np.ones(3) / 3, mode="valid")
    log_f0 = np.log(speaker.base_f0_hz) + speaker.f0_range * smooth + 0.003 * rng.standard_normal(T)
    f0 = np.where(voiced, np.exp(log_f0), np.nan)

    gain = np.exp(rng.uniform(-0.3, 0.3))
    envelopes = {u: _log_envelope(freqs, speaker, table[u]) for u in set(script.units)}
    log_env = np.empty((T, len(freqs)))
    rms = np.empty(T)
    for t, u in enumerate(labels):
        log_env[t] = envelopes[u]
        if voiced[t]:
            # sawtooth source: harmonic k has amplitude 1/k
            log_env[t] = log_env[t] + np.log(f0[t] / np.maximum(freqs, f0[t]))
        rms[t] = gain * table[u].gain
    samples = overlap_add_source_filter(f0, log_env, rms, spec, sample_rate, noise_seed=int(rng.integers(2**31)))
    return Waveform(samples, sample_rate), labels


# ---------------------------------------------------------------- corpus


def utterance_seed(corpus_seed: int, spk: int, utt: int) -> int:
    return int(np.random.default_rng([corpus_seed, spk, utt, 29]).integers(2**31))


def generate_corpus(config: Config) -> list:
    utts = []
    for s in range(config.n_speakers):
        speaker = generate_speaker(config.corpus_seed, s)
        for j in range(config.utts_per_speaker):
            seed = utterance_seed(config.corpus_seed, s, j)
            script = generate_script(np.random.default_rng([seed, 3]), config.n_units, config.utt_frames)
            wav, labels = synthesize_utterance(speaker, script, seed, config.n_units, config.ac_spec, config.sample_rate)
            utts.append(Utterance(f"{speaker.speaker_id}_u{j:02d}", speaker.speaker_id, wav, labels))
    return utts


def write_corpus(utts: list, out_dir) -> Path:
    """Write WAVs, per-frame label files and ``manifest.tsv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        wav_rel = f"wav/{u.utt_id}.wav"
        lab_rel = f"labels/{u.utt_id}.txt"
        write_wav(u.waveform, out_dir / wav_rel)
        with open(out_dir / lab_rel, "w", encoding="utf-8") as fh:
            fh.write("".join(f"{int(x)}\n" for x in u.labels))
        lines.append(f"{u.utt_id}\t{u.speaker_id}\t{wav_rel}\t{lab_rel}\n")
    manifest = out_dir / "manifest.tsv"
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("".join(lines))
    return manifest


def read_manifest(path) -> list:
    path = Path(path)
    base = path.parent
    utts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            utt_id, spk, wav_rel, lab_rel = parts
            wav = read_wav(base / wav_rel if not os.path.isabs(wav_rel) else wav_rel)
            lab_path = base / lab_rel if not os.path.isabs(lab_rel) else Path(lab_rel)
            labels = np.loadtxt(lab_path, dtype=np.int64, ndmin=1)
            utts.append(Utterance(utt_id, spk, wav, labels))
    return utts


def split_corpus(utts: list, config: Config) -> dict:
    """Protocol split by speaker order.

    The first ``pool_speakers`` speakers supply pseudo-speaker prompts and the
    attacker's external data; the remaining speakers are evaluated, with their
    first ``enroll_per_speaker`` utterances used for enrollment.
    """
    speakers = sorted({u.speaker_id for u in utts})
    pool_ids = set(speakers[: config.pool_speakers])
    external = [u for u in utts if u.speaker_id in pool_ids]
    enroll, trial = [], []
    seen: dict = {}
    for u in utts:
        if u.speaker_id in pool_ids:
            continue
        k = seen.get(u.speaker_id, 0)
        (enroll if k < config.enroll_per_speaker else trial).append(u)
        seen[u.speaker_id] = k + 1
    return {"external": external, "enroll": enroll, "trial": trial}
