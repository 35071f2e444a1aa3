"""Flat ``key=value`` configuration shared by every command."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .dsp import FrameSpec


class ConfigError(ValueError):
    pass


def _opt(default, doc):
    return field(default=default, metadata={"doc": doc})


@dataclass(frozen=True)
class Config:
    # audio analysis
    sample_rate: int = _opt(16000, "sample rate of every waveform (Hz)")
    sem_frame_len: int = _opt(400, "semantic analysis frame length (samples)")
    sem_hop: int = _opt(320, "semantic analysis hop (samples)")
    n_mels: int = _opt(24, "log-mel channels of the semantic frontend")
    sem_f0_weight: float = _opt(2.0, "scale of the z-scored log-F0 channel in semantic features")
    ac_frame_len: int = _opt(640, "codec analysis/synthesis frame length (samples)")
    ac_hop: int = _opt(320, "codec hop (samples); equal to sem_hop so T_A = T_S")
    n_cepstra: int = _opt(20, "real cepstral coefficients of the spectral envelope per codec frame vector")
    # quantizers
    n_s: int = _opt(32, "semantic codebook size N_S")
    n_q: int = _opt(64, "codewords per acoustic codebook N_Q")
    q: int = _opt(8, "number of acoustic codebooks Q")
    q_coarse: int = _opt(2, "number of coarse codebooks Q_C")
    kmeans_iters: int = _opt(50, "maximum Lloyd iterations per k-means run")
    kmeans_tol: float = _opt(1e-6, "relative centroid shift that stops Lloyd iterations")
    # token models
    lm_width: int = _opt(64, "transformer width")
    lm_heads: int = _opt(4, "attention heads")
    lm_blocks: int = _opt(2, "transformer blocks")
    lm_positions: int = _opt(512, "learned position embeddings P (max sequence length)")
    lm_window: int = _opt(48, "frames generated per chunk by the token models")
    lm_lr: float = _opt(0.1, "momentum-SGD learning rate")
    lm_batch: int = _opt(8, "sequences per training step")
    coarse_steps: int = _opt(800, "training steps of the coarse model")
    fine_steps: int = _opt(250, "training steps of each fine model")
    prompt_len: int = _opt(75, "maximum frames per pseudo-speaker prompt")
    temperature: float = _opt(0.7, "sampling temperature (0 = argmax)")
    # seeds
    corpus_seed: int = _opt(1, "synthetic corpus seed")
    train_seed: int = _opt(2, "model training seed")
    anon_seed: int = _opt(3, "defender master seed for pseudo-speaker selection and sampling")
    attacker_seed: int = _opt(4, "attacker master seed (must differ from anon_seed)")
    # corpus and protocol shape
    n_speakers: int = _opt(20, "speakers in the synthetic corpus")
    utts_per_speaker: int = _opt(10, "utterances per speaker")
    n_units: int = _opt(12, "content-unit alphabet size U")
    utt_frames: int = _opt(150, "approximate frames per utterance")
    pool_speakers: int = _opt(10, "leading speakers whose voices form the prompt pool and attacker external set")
    enroll_per_speaker: int = _opt(3, "enrollment utterances per evaluation speaker")

    def __post_init__(self):
        if not 1 <= self.q_coarse < self.q:
            raise ConfigError(f"need 1 <= q_coarse < q, got q_coarse={self.q_coarse} q={self.q}")
        if self.ac_hop != self.sem_hop:
            raise ConfigError("ac_hop must equal sem_hop")
        if self.pool_speakers >= self.n_speakers:
            raise ConfigError("pool_speakers must leave at least one evaluation speaker")
        if self.enroll_per_speaker >= self.utts_per_speaker:
            raise ConfigError("enroll_per_speaker must leave trial utterances")

    @property
    def sem_spec(self) -> FrameSpec:
        return FrameSpec(self.sem_frame_len, self.sem_hop)

    @property
    def ac_spec(self) -> FrameSpec:
        return FrameSpec(self.ac_frame_len, self.ac_hop)

    def with_overrides(self, **kw) -> "Config":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _coerce(key, raw, typ):
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def describe_keys() -> str:
    """One line per key with its default, for ``--help``."""
    return "\n".join(f"  {f.name}={f.default}  {f.metadata['doc']}" for f in fields(Config))
