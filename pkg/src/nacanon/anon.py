"""Pseudo-speaker prompt pool, selection policy and the end-to-end anonymizer."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lm
from .codec import AcousticTokens, RvqStack, decode, encode
from .container import read_container, write_container
from .dsp import Waveform
from .semantic import SemanticCodebook, tokenize

POOL_MAGIC = b"POOL"
BUNDLE_FILES = {
    "semantic": "semantic.semq",
    "rvq": "rvq.nacq",
    "coarse": "coarse.clmq",
    "fine": "fine.flmq",
    "pool": "prompts.pool",
}
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class EmptyPoolError(ValueError):
    pass


class ComponentMismatchError(ValueError):
    pass


def stable_hash(*parts) -> int:
    """64-bit FNV-1a over the UTF-8 of ``parts`` joined with the unit separator."""
    h = _FNV_OFFSET
    for byte in "\x1f".join(str(p) for p in parts).encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass
class PromptEntry:
    prompt_id: str
    tokens: AcousticTokens
    label: str = ""


@dataclass
class PromptPool:
    entries: list
    source: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> PromptEntry:
        return self.entries[i]

    def save(self, path) -> None:
        meta = {"n": len(self.entries), "source": self.source.replace("\n", " ")}
        tensors = {}
        for i, e in enumerate(self.entries):
            meta[f"id.{i}"] = e.prompt_id
            meta[f"label.{i}"] = e.label
            meta[f"n_q.{i}"] = e.tokens.n_q
            tensors[f"e{i:05d}"] = e.tokens.grid
        write_container(path, POOL_MAGIC, meta, tensors)

    @classmethod
    def load(cls, path) -> "PromptPool":
        meta, tensors = read_container(path, POOL_MAGIC)
        entries = [
            PromptEntry(meta[f"id.{i}"], AcousticTokens(tensors[f"e{i:05d}"], int(meta[f"n_q.{i}"])), meta[f"label.{i}"])
            for i in range(int(meta["n"]))
        ]
        return cls(entries, meta["source"])


def build_prompt_pool(items, rvq: RvqStack, prompt_len: int = 75, source: str = "") -> PromptPool:
    """``items`` are ``(prompt_id, Waveform, label)``; each entry keeps at most ``prompt_len`` frames."""
    entries = [PromptEntry(pid, encode(wav, rvq).frames(0, prompt_len), label) for pid, wav, label in items]
    if not entries:
        raise EmptyPoolError("prompt pool needs at least one utterance")
    return PromptPool(entries, source)


class Level(enum.Enum):
    SPEAKER = "speaker"
    UTTERANCE = "utterance"


SPEAKER_LEVEL = Level.SPEAKER
UTTERANCE_LEVEL = Level.UTTERANCE


@dataclass(frozen=True)
class AnonPolicy:
    level: Level = Level.SPEAKER
    seed: int = 3


def select_pseudo_speaker(pool: PromptPool, policy: AnonPolicy, speaker_id: str, utterance_id: str) -> int:
    """Index of the pool entry used as the prompt."""
    if len(pool) == 0:
        raise EmptyPoolError("prompt pool is empty")
    if policy.level is Level.SPEAKER:
        h = stable_hash(policy.seed, speaker_id)
    else:
        h = stable_hash(policy.seed, speaker_id, utterance_id)
    return h % len(pool)


@dataclass
class AnonSystem:
    semantic: SemanticCodebook
    rvq: RvqStack
    coarse: lm.CoarseLm
    fine: list
    pool: PromptPool
    temperature: float = 0.7
    policy: AnonPolicy = field(default_factory=AnonPolicy)

    def __post_init__(self):
        cs = self.coarse.shape
        problems = []
        if cs.n_s != self.semantic.n_s:
            problems.append(f"coarse N_S {cs.n_s} != semantic N_S {self.semantic.n_s}")
        if cs.n_q != self.rvq.n_q:
            problems.append(f"coarse N_Q {cs.n_q} != codec N_Q {self.rvq.n_q}")
        if cs.q_coarse != self.rvq.q_coarse:
            problems.append(f"coarse Q_C {cs.q_coarse} != codec Q_C {self.rvq.q_coarse}")
        levels = sorted(m.shape.level for m in self.fine)
        if levels != list(range(self.rvq.q_coarse, self.rvq.q)):
            problems.append(f"fine levels {levels} do not cover {self.rvq.q_coarse}..{self.rvq.q - 1}")
        if any(m.shape.n_q != self.rvq.n_q or m.shape.q != self.rvq.q for m in self.fine):
            problems.append("fine model codebook shape differs from the codec")
        if any(e.tokens.q != self.rvq.q or e.tokens.n_q != self.rvq.n_q for e in self.pool.entries):
            problems.append("prompt grid shape differs from the codec")
        if problems:
            raise ComponentMismatchError("; ".join(problems))

    def with_policy(self, policy: AnonPolicy) -> "AnonSystem":
        return dataclasses.replace(self, policy=policy)

    def save(self, bundle_dir) -> None:
        d = Path(bundle_dir)
        d.mkdir(parents=True, exist_ok=True)
        self.semantic.save(d / BUNDLE_FILES["semantic"])
        self.rvq.save(d / BUNDLE_FILES["rvq"])
        self.coarse.save(d / BUNDLE_FILES["coarse"])
        lm.save_fine_stack(d / BUNDLE_FILES["fine"], self.fine)
        self.pool.save(d / BUNDLE_FILES["pool"])

    @classmethod
    def load(cls, bundle_dir, temperature: float = 0.7, policy: AnonPolicy | None = None) -> "AnonSystem":
        d = Path(bundle_dir)
        return cls(
            SemanticCodebook.load(d / BUNDLE_FILES["semantic"]),
            RvqStack.load(d / BUNDLE_FILES["rvq"]),
            lm.CoarseLm.load(d / BUNDLE_FILES["coarse"]),
            lm.load_fine_stack(d / BUNDLE_FILES["fine"]),
            PromptPool.load(d / BUNDLE_FILES["pool"]),
            temperature,
            policy or AnonPolicy(),
        )


def generate_tokens(system: AnonSystem, waveform: Waveform, speaker_id: str, utterance_id: str) -> tuple:
    """Full acoustic token grid for the anonymized utterance and the chosen prompt index."""
    s = tokenize(waveform, system.semantic)
    idx = select_pseudo_speaker(system.pool, system.policy, speaker_id, utterance_id)
    prompt = system.pool[idx].tokens
    seed = system.policy.seed
    coarse = lm.sample_coarse(system.coarse, s, prompt.rows(system.rvq.q_coarse), len(s), system.temperature,
                              stable_hash(seed, "coarse", utterance_id))
    full = lm.sample_fine(system.fine, prompt, coarse, system.temperature, stable_hash(seed, "fine", utterance_id))
    return full, idx


def anonymize(system: AnonSystem, waveform: Waveform, speaker_id: str, utterance_id: str) -> Waveform:
    full, _ = generate_tokens(system, waveform, speaker_id, utterance_id)
    return decode(full, system.rvq)
