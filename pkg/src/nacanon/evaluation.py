"""Privacy and utility metrics: EER under a semi-informed attack, F0 correlation,
voice-distinctiveness gain and a content-unit error rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anon import AnonPolicy, AnonSystem, Level, anonymize
from .codec import acoustic_frame_vectors
from .corpus import collapse_runs
from .dsp import FrameSpec, Waveform, estimate_f0, frame_features
from .semantic import normalize_features

MIN_JOINT_VOICED = 10
DD_FLOOR = 1e-6


class EmptySetError(ValueError):
    pass


# ---------------------------------------------------------------- EER


def compute_eer(target_scores, nontarget_scores) -> float:
    """Equal error rate from a sweep over every distinct score used as threshold.

    miss(t) is the fraction of target scores below t and fa(t) the fraction
    of non-target scores at or above t.  The threshold minimizing
    ``|miss - fa|`` is kept (the lowest one on ties) and ``(miss + fa) / 2``
    is returned.
    """
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tgt.size == 0 or non.size == 0:
        raise EmptySetError("EER needs at least one target and one non-target score")
    thresholds = np.unique(np.concatenate([tgt, non]))
    miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    best = int(np.argmin(np.abs(miss - fa)))
    return float((miss[best] + fa[best]) / 2.0)


# ---------------------------------------------------------------- F0 correlation


def pitch_correlation(original: Waveform, anonymized: Waveform, spec: FrameSpec = FrameSpec(640, 320)):
    """Pearson correlation of F0 over frames voiced in both signals, or ``None`` if undefined."""
    a = estimate_f0(original, spec).f0_hz
    b = estimate_f0(anonymized, spec).f0_hz
    n = min(len(a), len(b))
    return f0_curve_correlation(a[:n], b[:n])


def f0_curve_correlation(a: np.ndarray, b: np.ndarray):
    both = np.isfinite(a) & np.isfinite(b)
    if both.sum() < MIN_JOINT_VOICED:
        return None
    x, y = a[both], b[both]
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt(np.sum(x * x) * np.sum(y * y))
    if denom == 0:
        return None
    return float(np.clip(np.sum(x * y) / denom, -1.0, 1.0))


# ---------------------------------------------------------------- speaker embeddings


def speaker_embedding(waveform: Waveform, spec: FrameSpec = FrameSpec(640, 320), n_cepstra: int = 20) -> np.ndarray:
    """Mean and standard deviation of the codec frame vectors, concatenated."""
    v = acoustic_frame_vectors(waveform, spec, n_cepstra).frames
    return np.concatenate([v.mean(axis=0), v.std(axis=0)])


@dataclass
class Whitener:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, embeddings: np.ndarray, labels=None) -> "Whitener":
        """Per-dimension centring and scaling.

        With speaker ``labels`` the scale uses the pooled within-speaker
        variance, so dimensions that vary between speakers more than within
        them dominate the cosine score.  Without labels it uses the total
        variance.
        """
        e = np.atleast_2d(embeddings)
        var = e.var(axis=0)
        if labels is not None:
            labels = np.asarray(labels)
            groups = [e[labels == g] for g in np.unique(labels)]
            groups = [g for g in groups if len(g) > 1]
            if groups:
                var = sum(((g - g.mean(axis=0)) ** 2).sum(axis=0) for g in groups) / sum(len(g) - 1 for g in groups)
        return cls(e.mean(axis=0), 1.0 / np.sqrt(np.maximum(var, 1e-12)))

    def __call__(self, e: np.ndarray) -> np.ndarray:
        return (e - self.mean) * self.scale


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between rows of ``a`` and rows of ``b``."""
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return a @ b.T


# ---------------------------------------------------------------- attack


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    score: float
    target: bool


@dataclass
class AttackResult:
    trials: list
    eer: float

    def scores(self, target: bool) -> np.ndarray:
        return np.array([t.score for t in self.trials if t.target == target])

    def to_text(self) -> str:
        return "".join(f"{t.enroll_id}\t{t.test_id}\t{t.score:.6f}\t{'target' if t.target else 'nontarget'}\n"
                       for t in self.trials)


def score_trials(external: list, enroll: list, trial: list, spec=FrameSpec(640, 320), n_cepstra: int = 20) -> AttackResult:
    """ASV back end: whiten with external data, average enrollment per speaker, cosine-score every trial.

    Each list holds ``(utt_id, speaker_id, Waveform)``.
    """
    if not external or not enroll or not trial:
        raise EmptySetError("external, enrollment and trial sets must be non-empty")
    if len({spk for _, spk, _ in external}) < 2:
        raise EmptySetError("external data must cover at least two speakers")
    emb = lambda items: np.stack([speaker_embedding(w, spec, n_cepstra) for _, _, w in items])
    white = Whitener.fit(emb(external), [spk for _, spk, _ in external])
    enroll_emb = white(emb(enroll))
    speakers = sorted({spk for _, spk, _ in enroll})
    models = np.stack([enroll_emb[[i for i, (_, s, _) in enumerate(enroll) if s == spk]].mean(axis=0) for spk in speakers])
    test = sorted(trial, key=lambda x: x[0])
    scores = cosine(models, white(emb(test)))
    trials = [
        Trial(spk, uid, float(scores[i, j]), spk == tspk)
        for i, spk in enumerate(speakers)
        for j, (uid, tspk, _) in enumerate(test)
    ]
    tgt = [t.score for t in trials if t.target]
    non = [t.score for t in trials if not t.target]
    return AttackResult(trials, compute_eer(tgt, non))


def semi_informed_attack(system: AnonSystem, enroll: list, trial: list, external: list, seed: int) -> tuple:
    """Attacker anonymizes its external data per utterance and its enrollment per speaker.

    ``trial`` holds the defender's (already anonymized) test utterances.
    All lists hold ``(utt_id, speaker_id, Waveform)``.  Returns the attack
    result and the attacker's anonymized external data (reused for the
    content classifier).
    """
    if not trial:
        raise EmptySetError("no trial utterances")
    utt_sys = system.with_policy(AnonPolicy(Level.UTTERANCE, seed))
    spk_sys = system.with_policy(AnonPolicy(Level.SPEAKER, seed))
    ext_anon = [(u, s, anonymize(utt_sys, w, s, u)) for u, s, w in external]
    enr_anon = [(u, s, anonymize(spk_sys, w, s, u)) for u, s, w in enroll]
    spec, nc = system.rvq.spec, system.rvq.n_cepstra
    return score_trials(ext_anon, enr_anon, trial, spec, nc), ext_anon


# ---------------------------------------------------------------- voice distinctiveness


def similarity_matrix(items: list, spec=FrameSpec(640, 320), n_cepstra: int = 20) -> tuple:
    """Speaker-by-speaker mean cosine similarity of whitened embeddings.

    Diagonal cells average over pairs of distinct utterances.  Returns the
    matrix and the sorted speaker ids.
    """
    speakers = sorted({spk for _, spk, _ in items})
    emb = np.stack([speaker_embedding(w, spec, n_cepstra) for _, _, w in items])
    sims = cosine(*(2 * [Whitener.fit(emb)(emb)]))
    labels = np.array([speakers.index(spk) for _, spk, _ in items])
    k = len(speakers)
    out = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            block = sims[np.ix_(labels == i, labels == j)]
            if i == j:
                n = block.shape[0]
                out[i, j] = (block.sum() - np.trace(block)) / max(n * (n - 1), 1)
            else:
                out[i, j] = block.mean()
    return out, speakers


def diagonal_dominance(m: np.ndarray) -> float:
    k = m.shape[0]
    off = (m.sum() - np.trace(m)) / (k * (k - 1))
    return abs(np.trace(m) / k - off)


def voice_distinctiveness_gain(orig_sim: np.ndarray, anon_sim: np.ndarray) -> float:
    orig_sim, anon_sim = np.asarray(orig_sim), np.asarray(anon_sim)
    if orig_sim.ndim != 2 or orig_sim.shape[0] != orig_sim.shape[1] or orig_sim.shape != anon_sim.shape:
        raise ValueError("similarity matrices must be square and of equal size")
    if orig_sim.shape[0] < 2:
        raise ValueError("need at least two speakers")
    dd_o = max(diagonal_dominance(orig_sim), DD_FLOOR)
    dd_a = max(diagonal_dominance(anon_sim), DD_FLOOR)
    return float(10.0 * np.log10(dd_a / dd_o))


# ---------------------------------------------------------------- content error rate


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def unit_error_rate(reference, hypothesis) -> float:
    if len(reference) == 0:
        raise ValueError("empty reference")
    return levenshtein(reference, hypothesis) / len(reference)


@dataclass
class ContentClassifier:
    """Nearest-centroid frame classifier over speaker-normalized log-mel + log-F0 features."""

    centroids: np.ndarray
    units: np.ndarray
    spec: FrameSpec = FrameSpec(400, 320)
    n_mels: int = 24

    def features(self, waveform: Waveform) -> np.ndarray:
        return normalize_features(frame_features(waveform, self.spec, self.n_mels).frames)

    @classmethod
    def fit(cls, items: list, spec=FrameSpec(400, 320), n_mels: int = 24) -> "ContentClassifier":
        """``items`` are ``(Waveform, per-frame labels)``."""
        probe = cls(np.zeros((1, 1)), np.zeros(1, dtype=np.int64), spec, n_mels)
        xs, ys = [], []
        for w, labels in items:
            x = probe.features(w)
            n = min(len(x), len(labels))
            xs.append(x[:n])
            ys.append(np.asarray(labels[:n]))
        if not xs:
            raise EmptySetError("no training utterances for the content classifier")
        x, y = np.concatenate(xs), np.concatenate(ys)
        units = np.unique(y)
        return cls(np.stack([x[y == u].mean(axis=0) for u in units]), units, spec, n_mels)

    def frame_labels(self, waveform: Waveform) -> np.ndarray:
        x = self.features(waveform)
        d = np.sum((x[:, None, :] - self.centroids[None]) ** 2, axis=-1)
        return self.units[np.argmin(d, axis=1)]

    def transcribe(self, waveform: Waveform, reference_labels) -> list:
        """Majority unit per ground-truth span, consecutive repeats collapsed."""
        ref = np.asarray(reference_labels)
        pred = self.frame_labels(waveform)
        n = min(len(pred), len(ref))
        hyp = []
        start = 0
        for t in range(1, n + 1):
            if t == n or ref[t] != ref[start]:
                vals, counts = np.unique(pred[start:t], return_counts=True)
                hyp.append(int(vals[np.argmax(counts)]))
                start = t
        return collapse_runs(hyp)


def content_error_rate(classifier: ContentClassifier, items: list) -> float:
    """Pooled unit error rate: total edits over total reference units.

    ``items`` are ``(Waveform, per-frame reference labels)``.
    """
    if not items:
        raise EmptySetError("no utterances to score")
    edits = total = 0
    for w, labels in items:
        if labels is None or len(labels) == 0:
            raise ValueError("missing ground-truth labels")
        ref = collapse_runs(labels)
        edits += levenshtein(ref, classifier.transcribe(w, labels))
        total += len(ref)
    return edits / total


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    eer_original: float
    eer_anonymized: float
    rho_f0: float | None
    rho_f0_defined: int
    rho_f0_undefined: int
    g_vd_db: float
    cer_original: float
    cer_anonymized: float
    n_target_trials: int
    n_nontarget_trials: int
    n_trial_utterances: int
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"

        lines = [
            f"eer_original={fmt(self.eer_original)}",
            f"eer_anonymized={fmt(self.eer_anonymized)}",
            f"rho_f0={fmt(self.rho_f0)}",
            f"rho_f0_defined={self.rho_f0_defined}",
            f"rho_f0_undefined={self.rho_f0_undefined}",
            f"g_vd_db={fmt(self.g_vd_db)}",
            f"content_error_rate_original={fmt(self.cer_original)}",
            f"content_error_rate_anonymized={fmt(self.cer_anonymized)}",
            f"target_trials={self.n_target_trials}",
            f"nontarget_trials={self.n_nontarget_trials}",
            f"trial_utterances={self.n_trial_utterances}",
        ]
        lines += [f"{k}={fmt(v) if isinstance(v, float) else v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> dict:
        """Parse a report into a ``key -> str`` mapping."""
        return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
