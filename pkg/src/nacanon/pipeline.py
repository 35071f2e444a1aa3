"""Training orchestration: corpus -> semantic codebook, codec, token models, prompt pool."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import lm
from .anon import AnonPolicy, AnonSystem, anonymize, build_prompt_pool
from .codec import AcousticTokens, acoustic_frame_vectors, train_rvq
from .config import Config
from .semantic import SemanticTokens, semantic_features, tokenize_features, train_semantic

log = logging.getLogger(__name__)


@dataclass
class _TrainItem:
    speaker_id: str
    s: np.ndarray  # semantic tokens
    grid: np.ndarray  # Q x T acoustic tokens, trimmed to len(s)


def coarse_shape(config: Config) -> lm.CoarseShape:
    return lm.CoarseShape(config.n_s, config.n_q, config.q_coarse, config.lm_width, config.lm_heads,
                          config.lm_blocks, config.lm_positions, config.lm_window)


def fine_shape(config: Config, level: int) -> lm.FineShape:
    return lm.FineShape(config.n_q, config.q, level, config.lm_width, config.lm_heads, config.lm_blocks,
                        config.lm_positions, config.lm_window)


class _Sampler:
    """Draws (prompt, target window) pairs of one speaker for token-model training.

    The prompt is a ``prompt_len`` crop of a different utterance of the same
    speaker, so the models learn to carry the voice over from the prompt.
    """

    def __init__(self, items: list, config: Config, seed):
        self.items = items
        self.config = config
        self.seed = seed
        self.by_speaker = {}
        for i, it in enumerate(items):
            self.by_speaker.setdefault(it.speaker_id, []).append(i)

    def draw(self, step: int, k: int):
        c = self.config
        rng = np.random.default_rng([*self.seed, step, k])
        it = self.items[rng.integers(len(self.items))]
        mates = [j for j in self.by_speaker[it.speaker_id] if self.items[j] is not it] or self.by_speaker[it.speaker_id]
        other = self.items[mates[rng.integers(len(mates))]].grid
        tp = min(c.prompt_len, other.shape[1])
        a = rng.integers(other.shape[1] - tp + 1)
        prompt = other[:, a : a + tp]
        t = len(it.s)
        length = min(c.lm_window, t)
        b = rng.integers(t - length + 1)
        return it.s[b : b + length], prompt, it.grid[:, b : b + length]


def _coarse_batches(sampler: _Sampler, config: Config):
    def batch(step):
        out = []
        for k in range(config.lm_batch):
            s, prompt, target = sampler.draw(step, k)
            out.append(lm.flatten_coarse(SemanticTokens(s, config.n_s), AcousticTokens(prompt, config.n_q),
                                         AcousticTokens(target, config.n_q), config.q_coarse))
        return out

    return batch


def _fine_batches(sampler: _Sampler, config: Config):
    def batch(step):
        return [lm.FineExample(*sampler.draw(step, k)[1:]) for k in range(config.lm_batch)]

    return batch


def train_system(config: Config, utterances: list, progress=None) -> tuple:
    """Train every component on ``utterances``; returns ``(AnonSystem, losses)``.

    ``losses`` maps model names to their per-step loss traces.
    """
    say = progress or log.info
    c = config
    sem_feats = [semantic_features(u.waveform, c.sem_spec, c.n_mels, f0_weight=c.sem_f0_weight) for u in utterances]
    semantic = train_semantic(sem_feats, c.n_s, c.train_seed, c.kmeans_iters, c.kmeans_tol, c.sem_spec, c.n_mels,
                               f0_weight=c.sem_f0_weight)
    say(f"semantic codebook: {semantic.n_s} codewords from {sum(len(f) for f in sem_feats)} frames")
    ac_feats = [acoustic_frame_vectors(u.waveform, c.ac_spec, c.n_cepstra) for u in utterances]
    rvq = train_rvq(ac_feats, c.q, c.n_q, c.train_seed, c.q_coarse, c.kmeans_iters, c.kmeans_tol,
                    c.ac_spec, c.n_cepstra, c.sample_rate)
    say(f"codec: {rvq.q} codebooks x {rvq.n_q} codewords")

    items = []
    for u, sf, af in zip(utterances, sem_feats, ac_feats):
        s = tokenize_features(sf, semantic).tokens
        grid = rvq.quantize(af.frames)
        t = min(len(s), grid.shape[1])
        items.append(_TrainItem(u.speaker_id, s[:t], grid[:, :t]))

    losses = {}
    coarse = lm.init_coarse(coarse_shape(c), c.train_seed)
    sampler = _Sampler(items, c, (c.train_seed, 0))
    losses["coarse"] = lm.train_coarse(coarse, _coarse_batches(sampler, c), c.lm_lr, c.coarse_steps)
    say(f"coarse model: loss {losses['coarse'][0]:.3f} -> {_tail(losses['coarse']):.3f}")
    fine = []
    for level in range(c.q_coarse, c.q):
        model = lm.init_fine(fine_shape(c, level), c.train_seed)
        sampler = _Sampler(items, c, (c.train_seed, level))
        losses[f"fine{level}"] = lm.train_fine(model, _fine_batches(sampler, c), c.lm_lr, c.fine_steps)
        say(f"fine model level {level}: loss {losses[f'fine{level}'][0]:.3f} -> {_tail(losses[f'fine{level}']):.3f}")
        fine.append(model)

    pool = build_prompt_pool([(u.utt_id, u.waveform, u.speaker_id) for u in utterances], rvq, c.prompt_len,
                             source="training utterances")
    say(f"prompt pool: {len(pool)} prompts")
    system = AnonSystem(semantic, rvq, coarse, fine, pool, c.temperature, AnonPolicy(seed=c.anon_seed))
    return system, losses


def _tail(trace: np.ndarray, n: int = 20) -> float:
    return float(np.mean(trace[-n:])) if len(trace) else float("nan")


@dataclass
class EvaluationResult:
    report: "MetricsReport"
    original_attack: "AttackResult"
    anonymized_attack: "AttackResult"
    anonymized_trials: list  # (utt_id, speaker_id, Waveform)
    prompt_choices: dict  # utt_id -> pool index used by the defender


def run_evaluation(system: AnonSystem, config: Config, split: dict, progress=None) -> EvaluationResult:
    """Full protocol on a corpus split (see ``corpus.split_corpus``)."""
    from .anon import select_pseudo_speaker
    from .evaluation import (
        ContentClassifier,
        MetricsReport,
        content_error_rate,
        pitch_correlation,
        score_trials,
        semi_informed_attack,
        similarity_matrix,
        voice_distinctiveness_gain,
    )

    say = progress or log.info
    c = config
    if c.attacker_seed == c.anon_seed:
        log.warning("attacker seed equals defender seed: the attacker reproduces every pseudo-speaker choice")
    spec, nc = system.rvq.spec, system.rvq.n_cepstra
    triple = lambda us: [(u.utt_id, u.speaker_id, u.waveform) for u in us]
    external, enroll, trial = triple(split["external"]), triple(split["enroll"]), triple(split["trial"])

    defender = system.with_policy(AnonPolicy(seed=c.anon_seed))
    choices = {u: select_pseudo_speaker(system.pool, defender.policy, s, u) for u, s, _ in trial}
    trial_anon = [(u, s, anonymize(defender, w, s, u)) for u, s, w in trial]
    say(f"defender anonymized {len(trial_anon)} trial utterances")

    original = score_trials(external, enroll, trial, spec, nc)
    attacked, ext_anon = semi_informed_attack(system, enroll, trial_anon, external, c.attacker_seed)
    say(f"EER original {original.eer:.3f}, anonymized {attacked.eer:.3f}")

    rhos = [pitch_correlation(w, a, spec) for (_, _, w), (_, _, a) in zip(trial, trial_anon)]
    defined = [r for r in rhos if r is not None]
    rho = float(np.mean(defined)) if defined else None

    orig_sim, _ = similarity_matrix(trial, spec, nc)
    anon_sim, _ = similarity_matrix(trial_anon, spec, nc)
    g_vd = voice_distinctiveness_gain(orig_sim, anon_sim)

    labels = {u.utt_id: u.labels for u in split["external"] + split["trial"]}
    clf_orig = ContentClassifier.fit([(w, labels[u]) for u, _, w in external], system.semantic.spec, system.semantic.n_mels)
    clf_anon = ContentClassifier.fit([(w, labels[u]) for u, _, w in ext_anon], system.semantic.spec, system.semantic.n_mels)
    cer_orig = content_error_rate(clf_orig, [(w, labels[u]) for u, _, w in trial])
    cer_anon = content_error_rate(clf_anon, [(w, labels[u]) for u, _, w in trial_anon])
    say(f"rho_f0 {rho}, G_VD {g_vd:.2f} dB, CER {cer_orig:.3f} -> {cer_anon:.3f}")

    report = MetricsReport(
        eer_original=original.eer,
        eer_anonymized=attacked.eer,
        rho_f0=rho,
        rho_f0_defined=len(defined),
        rho_f0_undefined=len(rhos) - len(defined),
        g_vd_db=g_vd,
        cer_original=cer_orig,
        cer_anonymized=cer_anon,
        n_target_trials=int(sum(t.target for t in attacked.trials)),
        n_nontarget_trials=int(sum(not t.target for t in attacked.trials)),
        n_trial_utterances=len(trial),
    )
    return EvaluationResult(report, original, attacked, trial_anon, choices)
