"""Coarse (autoregressive) and fine (non-autoregressive) acoustic-token models.

The coarse model reads one flattened sequence: semantic tokens, then the
prompt's coarse rows, then the target's coarse rows, frame-major.  All
tokens share one vocabulary: semantic ids occupy ``[0, N_S)`` and codebook
``q`` (0-based) occupies ``[N_S + q*N_Q, N_S + (q+1)*N_Q)``.

Besides the usual token, segment and position embeddings, the input at a
position whose *next* token is a target token also receives an embedding of
the semantic token of the frame being predicted and of its codebook slot.
The semantic sequence is a prefix of the flattened sequence, so this keeps
the model causal while giving it the frame alignment directly instead of
asking a two-block model to discover it through attention.

The fine stage has one model per level ``q > Q_C``.  Each sees the full
prompt grid and the target rows below ``q``, attends without a mask and
predicts row ``q`` for all frames at once.  It never sees semantic tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import transformer as tf
from .codec import AcousticTokens
from .container import f32_round, read_container, write_container
from .semantic import SemanticTokens

COARSE_MAGIC = b"CLMQ"
FINE_MAGIC = b"FLMQ"

SEMANTIC, PROMPT_COARSE, TARGET_COARSE = 0, 1, 2


class CapacityError(ValueError):
    """Sequence longer than the model's position table."""


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


class RowCountError(ValueError):
    pass


class LevelConfigError(ValueError):
    """Fine-level models missing or inconsistent."""


# ---------------------------------------------------------------- flattening


@dataclass
class TokenSequence:
    ids: np.ndarray
    segments: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.segments = np.asarray(self.segments, dtype=np.int64).reshape(-1)
        if self.ids.shape != self.segments.shape:
            raise ValueError("ids and segments must have equal length")
        if self.segments.size:
            if self.segments.min() < SEMANTIC or self.segments.max() > TARGET_COARSE:
                raise ValueError("unknown segment tag")
            if np.any(np.diff(self.segments) < 0):
                raise ValueError("segments must run semantic -> prompt -> target")

    def __len__(self) -> int:
        return self.ids.shape[0]

    def count(self, segment: int) -> int:
        return int(np.sum(self.segments == segment))


def flatten_coarse(s: SemanticTokens, prompt: AcousticTokens, target: AcousticTokens, q_coarse: int) -> TokenSequence:
    if prompt.q < q_coarse or target.q < q_coarse:
        raise RowCountError(f"prompt ({prompt.q}) and target ({target.q}) need at least {q_coarse} rows")
    if prompt.n_q != target.n_q:
        raise RowCountError("prompt and target use different codebook sizes")
    offsets = s.n_s + np.arange(q_coarse)[:, None] * prompt.n_q
    p = (prompt.grid[:q_coarse] + offsets).T.reshape(-1)
    t = (target.grid[:q_coarse] + offsets).T.reshape(-1)
    ids = np.concatenate([s.tokens, p, t])
    segments = np.repeat([SEMANTIC, PROMPT_COARSE, TARGET_COARSE], [len(s.tokens), len(p), len(t)])
    return TokenSequence(ids, segments)


def unflatten_coarse(seq: TokenSequence, q_coarse: int, n_s: int, n_q: int) -> tuple:
    """Inverse of ``flatten_coarse``: ``(SemanticTokens, prompt rows, target rows)``."""
    s = SemanticTokens(seq.ids[seq.segments == SEMANTIC], n_s)
    offsets = n_s + np.arange(q_coarse)[:, None] * n_q
    grids = []
    for seg in (PROMPT_COARSE, TARGET_COARSE):
        part = seq.ids[seq.segments == seg]
        if part.size % q_coarse:
            raise RowCountError(f"segment length {part.size} is not a multiple of {q_coarse}")
        grids.append(AcousticTokens(part.reshape(-1, q_coarse).T - offsets, n_q))
    return s, grids[0], grids[1]


# ---------------------------------------------------------------- shared pieces


def _sum_grads(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g**2) for g in grads.values())))


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits`` (rows x classes)."""
    probs = tf.softmax(logits)
    n = len(targets)
    loss = -np.mean(np.log(np.maximum(probs[np.arange(n), targets], 1e-300)))
    dlogits = probs
    dlogits[np.arange(n), targets] -= 1.0
    return loss, dlogits / n


def _draw(rng: np.random.Generator, logits: np.ndarray, temperature: float) -> np.ndarray:
    """One categorical draw per row; temperature 0 is argmax (lowest index on ties)."""
    if temperature <= 0:
        return np.argmax(logits, axis=-1)
    p = tf.softmax(logits / temperature)
    c = np.cumsum(p, axis=-1)
    u = rng.random(len(p))[:, None] * c[:, -1:]
    return np.minimum(np.sum(c <= u, axis=-1), p.shape[-1] - 1)


def _chunk_starts(t_a: int, window: int) -> tuple:
    """Equal-length chunks covering ``t_a`` frames; the last one may overlap its predecessor."""
    length = min(window, t_a)
    starts = list(range(0, t_a - length + 1, length))
    if starts[-1] + length < t_a:
        starts.append(t_a - length)
    return starts, length


def _stitch(chunks: list, starts: list, length: int, t_a: int) -> np.ndarray:
    """Place chunk grids; an overlapping final chunk only fills the frames not yet covered."""
    out = np.empty((chunks[0].shape[0], t_a), dtype=np.int64)
    covered = 0
    for grid, a in zip(chunks, starts):
        out[:, covered : a + length] = grid[:, covered - a :]
        covered = a + length
    return out


class _Model:
    magic = b"????"

    def __init__(self, shape, params: dict):
        self.shape = shape
        self.params = params

    def round_params(self) -> None:
        for k in self.params:
            self.params[k] = f32_round(self.params[k])

    def save(self, path) -> None:
        write_container(path, self.magic, asdict(self.shape), self.params)

    @classmethod
    def load(cls, path):
        meta, tensors = read_container(path, cls.magic)
        return cls(cls.shape_type.from_meta(meta), tensors)


def _from_meta(cls, meta: dict):
    kw = {}
    for name, f in cls.__dataclass_fields__.items():
        raw = meta[name]
        kw[name] = (raw == "True") if f.type in ("bool", bool) else int(raw)
    return cls(**kw)


def _train(model, loss_and_grads, batches, lr: float, steps: int, momentum: float = 0.9, clip: float = 1.0) -> np.ndarray:
    """Momentum SGD with global gradient-norm clipping; returns the pre-update loss per step."""
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = np.empty(steps)
    for step in range(steps):
        batch = batches(step) if callable(batches) else batches
        loss, grads = loss_and_grads(model, batch)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        trace[step] = loss
        norm = _sum_grads(grads)
        scale = clip / norm if norm > clip else 1.0
        for k, g in grads.items():
            velocity[k] = momentum * velocity[k] + scale * g
            model.params[k] = model.params[k] - lr * velocity[k]
    model.round_params()
    return trace


# ---------------------------------------------------------------- coarse model


@dataclass(frozen=True)
class CoarseShape:
    n_s: int
    n_q: int
    q_coarse: int
    width: int = 64
    heads: int = 4
    blocks: int = 2
    positions: int = 512
    window: int = 48

    @property
    def vocab(self) -> int:
        return self.n_s + self.q_coarse * self.n_q

    from_meta = classmethod(_from_meta)


class CoarseLm(_Model):
    magic = COARSE_MAGIC
    shape_type = CoarseShape


def init_coarse(shape: CoarseShape, seed: int, std: float = 0.05) -> CoarseLm:
    if shape.width % shape.heads:
        raise ValueError("width must be divisible by heads")
    rng = np.random.default_rng([seed, 7])
    w = shape.width
    params = {
        "tok_emb": rng.normal(0.0, std, (shape.vocab, w)),
        "pos_emb": rng.normal(0.0, std, (shape.positions, w)),
        "seg_emb": rng.normal(0.0, std, (3, w)),
        "cond_sem": rng.normal(0.0, std, (shape.n_s, w)),
        "cond_slot": rng.normal(0.0, std, (shape.q_coarse, w)),
    }
    tf.init_blocks(params, rng, w, shape.blocks, std)
    params["w_out"] = rng.normal(0.0, std, (w, shape.vocab))
    params["b_out"] = np.zeros(shape.vocab)
    lm = CoarseLm(shape, params)
    lm.round_params()
    return lm


def _coarse_layout(seq: TokenSequence, q_coarse: int):
    """Positions whose next token is a target token, with that token's frame and slot."""
    n_sem = seq.count(SEMANTIC)
    nxt = np.flatnonzero(seq.segments[1:] == TARGET_COARSE)
    j = nxt + 1 - (len(seq) - seq.count(TARGET_COARSE))
    frame = np.minimum(j // q_coarse, max(n_sem - 1, 0))
    return nxt, frame, j % q_coarse, n_sem


def _coarse_embed(lm: CoarseLm, seqs: list):
    p = lm.params
    n = len(seqs[0])
    if n > lm.shape.positions:
        raise CapacityError(f"sequence length {n} exceeds {lm.shape.positions} positions")
    ids = np.stack([s.ids for s in seqs])
    if ids.size and (ids.min() < 0 or ids.max() >= lm.shape.vocab):
        raise ValueError(f"token id outside vocabulary of size {lm.shape.vocab}")
    pos, frame, slot, n_sem = _coarse_layout(seqs[0], lm.shape.q_coarse)
    x = p["tok_emb"][ids] + p["pos_emb"][:n] + p["seg_emb"][seqs[0].segments]
    x[:, pos] += p["cond_slot"][slot]
    sem_ids = ids[:, frame] if n_sem else None
    if n_sem:
        x[:, pos] += p["cond_sem"][sem_ids]
    return x, ids, (pos, slot, sem_ids)


def _group(seqs: list, key) -> list:
    groups = {}
    for s in seqs:
        groups.setdefault(key(s), []).append(s)
    return list(groups.values())


def coarse_forward(lm: CoarseLm, seq: TokenSequence) -> np.ndarray:
    """Next-token distribution at every position, shape ``(len(seq), V)``."""
    x, _, _ = _coarse_embed(lm, [seq])
    h, _ = tf.forward(lm.params, x, lm.shape.blocks, lm.shape.heads, causal=True)
    return tf.softmax(h[0] @ lm.params["w_out"] + lm.params["b_out"])


def coarse_loss_and_grads(lm: CoarseLm, seqs: list) -> tuple:
    """Mean cross-entropy over target-coarse predictions of all sequences, and its gradients."""
    p = lm.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    total = sum(s.count(TARGET_COARSE) for s in seqs)
    if total == 0:
        return 0.0, grads
    loss = 0.0
    for group in _group(seqs, lambda s: s.segments.tobytes()):
        x, ids, (pos, slot, sem_ids) = _coarse_embed(lm, group)
        h, cache = tf.forward(p, x, lm.shape.blocks, lm.shape.heads, causal=True)
        hs = h[:, pos]
        targets = ids[:, pos + 1]
        logits = hs @ p["w_out"] + p["b_out"]
        part, dlogits = _cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
        weight = targets.size / total
        loss += part * weight
        dlogits = (dlogits * weight).reshape(logits.shape)
        dw, db = tf._linear_grads(hs, dlogits)
        grads["w_out"] += dw
        grads["b_out"] += db
        dh = np.zeros_like(h)
        dh[:, pos] = dlogits @ p["w_out"].T
        dx = tf.backward(p, dh, cache, grads)
        np.add.at(grads["tok_emb"], ids, dx)
        grads["pos_emb"][: x.shape[1]] += dx.sum(axis=0)
        np.add.at(grads["seg_emb"], group[0].segments, dx.sum(axis=0))
        dcond = dx[:, pos]
        np.add.at(grads["cond_slot"], slot, dcond.sum(axis=0))
        if sem_ids is not None:
            np.add.at(grads["cond_sem"], sem_ids, dcond)
    return float(loss), grads


def train_coarse(lm: CoarseLm, batches, lr: float, steps: int, momentum: float = 0.9, clip: float = 1.0) -> np.ndarray:
    """``batches`` is a list of sequences reused every step, or ``step -> list``."""
    return _train(lm, coarse_loss_and_grads, batches, lr, steps, momentum, clip)


def sample_coarse(lm: CoarseLm, s: SemanticTokens, prompt_coarse: AcousticTokens, t_a: int,
                  temperature: float, seed) -> AcousticTokens:
    """Sample ``Q_C x t_a`` coarse tokens.

    Frames are generated in chunks of at most ``window`` frames (the length
    the model was trained on), each conditioned on its own slice of ``s`` and
    the full prompt.  Chunks run as one batch through a key/value cache.
    """
    sh = lm.shape
    if t_a < 1:
        raise ValueError("t_a must be >= 1")
    if len(s) < 1:
        raise ValueError("need at least one semantic token")
    if s.n_s != sh.n_s or prompt_coarse.n_q != sh.n_q:
        raise ValueError("tokens do not match the model vocabulary")
    qc = sh.q_coarse
    starts, length = _chunk_starts(t_a, sh.window)
    empty = AcousticTokens(np.zeros((qc, 0), dtype=np.int64), sh.n_q)
    seqs = []
    for a in starts:
        # s may be shorter than t_a by a frame or two; clamp the slice
        sa = min(a, len(s) - 1)
        chunk_s = SemanticTokens(s.tokens[sa : sa + length], sh.n_s)
        seqs.append(flatten_coarse(chunk_s, prompt_coarse, empty, qc))
    if len({len(q) for q in seqs}) != 1:
        # ragged semantic slices: sample each chunk on its own
        grids = [_sample_batch(lm, [q], length, temperature, np.random.default_rng(seed))[0] for q in seqs]
    else:
        grids = _sample_batch(lm, seqs, length, temperature, np.random.default_rng(seed))
    return AcousticTokens(_stitch(grids, starts, length, t_a), sh.n_q)


def _sample_batch(lm: CoarseLm, prefixes: list, length: int, temperature: float, rng) -> list:
    sh, p = lm.shape, lm.params
    qc = sh.q_coarse
    n0 = len(prefixes[0])
    n_total = n0 + qc * length
    if n_total > sh.positions:
        raise CapacityError(f"sequence length {n_total} exceeds {sh.positions} positions")
    n_sem = prefixes[0].count(SEMANTIC)
    sem = np.stack([q.ids[:n_sem] for q in prefixes])
    B = len(prefixes)

    def cond(j):
        c = p["cond_slot"][j % qc]
        if n_sem:
            c = c + p["cond_sem"][sem[:, min(j // qc, n_sem - 1)]]
        return c

    ids = np.stack([q.ids for q in prefixes])
    x = p["tok_emb"][ids] + p["pos_emb"][:n0] + p["seg_emb"][prefixes[0].segments]
    x[:, -1] += cond(0)
    cache = tf.KVCache(sh.blocks)
    h = tf.forward_cached(p, x, sh.blocks, sh.heads, cache)[:, -1]
    out = np.empty((B, qc * length), dtype=np.int64)
    for j in range(qc * length):
        lo = sh.n_s + (j % qc) * sh.n_q
        logits = h @ p["w_out"][:, lo : lo + sh.n_q] + p["b_out"][lo : lo + sh.n_q]
        tok = _draw(rng, logits, temperature)
        out[:, j] = tok
        if j + 1 == qc * length:
            break
        x = p["tok_emb"][lo + tok] + p["pos_emb"][n0 + j] + p["seg_emb"][TARGET_COARSE] + cond(j + 1)
        h = tf.forward_cached(p, x[:, None, :], sh.blocks, sh.heads, cache)[:, -1]
    return [row.reshape(length, qc).T for row in out]


# ---------------------------------------------------------------- fine models


@dataclass(frozen=True)
class FineShape:
    n_q: int
    q: int
    level: int  # 0-based codebook row this model predicts
    width: int = 64
    heads: int = 4
    blocks: int = 2
    positions: int = 512
    window: int = 48
    use_positions: bool = True

    from_meta = classmethod(_from_meta)


class FineLm(_Model):
    magic = FINE_MAGIC
    shape_type = FineShape


def init_fine(shape: FineShape, seed: int, std: float = 0.05) -> FineLm:
    if not 1 <= shape.level < shape.q:
        raise LevelConfigError(f"fine level {shape.level} outside [1, {shape.q})")
    rng = np.random.default_rng([seed, 11, shape.level])
    w = shape.width
    params = {
        "emb": rng.normal(0.0, std, (shape.q * shape.n_q, w)),
        "pos_emb": rng.normal(0.0, std, (shape.positions, w)),
        "seg_emb": rng.normal(0.0, std, (2, w)),
    }
    tf.init_blocks(params, rng, w, shape.blocks, std)
    params["w_out"] = rng.normal(0.0, std, (w, shape.n_q))
    params["b_out"] = np.zeros(shape.n_q)
    lm = FineLm(shape, params)
    lm.round_params()
    return lm


@dataclass
class FineExample:
    """A prompt grid (all Q rows) and a target grid holding at least ``level + 1`` rows."""

    prompt: np.ndarray
    target: np.ndarray


def _fine_embed(lm: FineLm, prompts: np.ndarray, lowers: np.ndarray):
    """``prompts`` (B, Q, Tp) and ``lowers`` (B, level, T) to block inputs (B, Tp+T, W)."""
    sh, p = lm.shape, lm.params
    tp, t = prompts.shape[2], lowers.shape[2]
    if tp + t > sh.positions:
        raise CapacityError(f"{tp + t} frames exceed {sh.positions} positions")
    if prompts.shape[1] != sh.q or lowers.shape[1] != sh.level:
        raise LevelConfigError(f"level-{sh.level} model needs {sh.q} prompt rows and {sh.level} lower rows")
    prompt_idx = prompts + (np.arange(sh.q) * sh.n_q)[None, :, None]
    lower_idx = lowers + (np.arange(sh.level) * sh.n_q)[None, :, None]
    x = np.concatenate([p["emb"][prompt_idx].sum(axis=1), p["emb"][lower_idx].sum(axis=1)], axis=1)
    seg = np.repeat([0, 1], [tp, t])
    x += p["seg_emb"][seg]
    if sh.use_positions:
        x += p["pos_emb"][: tp + t]
    return x, prompt_idx, lower_idx, seg


def fine_forward(lm: FineLm, prompt: AcousticTokens, lower: AcousticTokens) -> np.ndarray:
    """Per-frame distributions over ``N_Q`` for this model's level, shape ``(T, N_Q)``."""
    x, _, _, _ = _fine_embed(lm, prompt.grid[None], lower.grid[None, : lm.shape.level])
    h, _ = tf.forward(lm.params, x, lm.shape.blocks, lm.shape.heads, causal=False)
    tp = prompt.num_frames
    return tf.softmax(h[0, tp:] @ lm.params["w_out"] + lm.params["b_out"])


def fine_loss_and_grads(lm: FineLm, examples: list) -> tuple:
    p, sh = lm.params, lm.shape
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    total = sum(e.target.shape[1] for e in examples)
    loss = 0.0
    for group in _group(examples, lambda e: (e.prompt.shape[1], e.target.shape[1])):
        prompts = np.stack([e.prompt for e in group])
        targets = np.stack([e.target for e in group])
        x, prompt_idx, lower_idx, seg = _fine_embed(lm, prompts, targets[:, : sh.level])
        h, cache = tf.forward(p, x, sh.blocks, sh.heads, causal=False)
        tp = prompts.shape[2]
        hs = h[:, tp:]
        logits = hs @ p["w_out"] + p["b_out"]
        labels = targets[:, sh.level]
        part, dlogits = _cross_entropy(logits.reshape(-1, sh.n_q), labels.reshape(-1))
        weight = labels.size / total
        loss += part * weight
        dlogits = (dlogits * weight).reshape(logits.shape)
        dw, db = tf._linear_grads(hs, dlogits)
        grads["w_out"] += dw
        grads["b_out"] += db
        dh = np.zeros_like(h)
        dh[:, tp:] = dlogits @ p["w_out"].T
        dx = tf.backward(p, dh, cache, grads)
        np.add.at(grads["emb"], prompt_idx, np.broadcast_to(dx[:, None, :tp], prompt_idx.shape + dx.shape[-1:]))
        np.add.at(grads["emb"], lower_idx, np.broadcast_to(dx[:, None, tp:], lower_idx.shape + dx.shape[-1:]))
        np.add.at(grads["seg_emb"], seg, dx.sum(axis=0))
        if sh.use_positions:
            grads["pos_emb"][: x.shape[1]] += dx.sum(axis=0)
    return float(loss), grads


def train_fine(lm: FineLm, batches, lr: float, steps: int, momentum: float = 0.9, clip: float = 1.0) -> np.ndarray:
    return _train(lm, fine_loss_and_grads, batches, lr, steps, momentum, clip)


def sample_fine(fine_lms: list, prompt: AcousticTokens, coarse: AcousticTokens, temperature: float, seed) -> AcousticTokens:
    """Complete a coarse grid level by level; coarse rows are copied unchanged."""
    if not fine_lms:
        raise LevelConfigError("no fine-level models")
    q = fine_lms[0].shape.q
    levels = sorted(m.shape.level for m in fine_lms)
    q_coarse = coarse.q
    if levels != list(range(q_coarse, q)) or any(m.shape.q != q for m in fine_lms):
        raise LevelConfigError(f"need one fine model per level {q_coarse}..{q - 1}, have {levels}")
    if prompt.q != q:
        raise LevelConfigError(f"prompt grid has {prompt.q} rows, models expect {q}")
    by_level = {m.shape.level: m for m in fine_lms}
    rng = np.random.default_rng(seed)
    t_a = coarse.num_frames
    starts, length = _chunk_starts(t_a, fine_lms[0].shape.window)
    grid = np.concatenate([coarse.grid, np.zeros((q - q_coarse, t_a), dtype=np.int64)])
    for level in range(q_coarse, q):
        lm = by_level[level]
        lowers = np.stack([grid[:level, a : a + length] for a in starts])
        prompts = np.broadcast_to(prompt.grid, (len(starts),) + prompt.grid.shape)
        x, _, _, _ = _fine_embed(lm, prompts, lowers)
        h, _ = tf.forward(lm.params, x, lm.shape.blocks, lm.shape.heads, causal=False)
        logits = h[:, prompt.num_frames :] @ lm.params["w_out"] + lm.params["b_out"]
        rows = _draw(rng, logits.reshape(-1, lm.shape.n_q), temperature).reshape(len(starts), length)
        grid[level] = _stitch([r[None] for r in rows], starts, length, t_a)[0]
    return AcousticTokens(grid, coarse.n_q)


def save_fine_stack(path, fine_lms: list) -> None:
    """All fine-level models in one container; tensors are prefixed ``L<level>.``."""
    if not fine_lms:
        raise LevelConfigError("no fine-level models")
    meta = asdict(fine_lms[0].shape)
    meta.pop("level")
    meta["levels"] = ",".join(str(m.shape.level) for m in fine_lms)
    tensors = {f"L{m.shape.level}.{k}": v for m in fine_lms for k, v in m.params.items()}
    write_container(path, FINE_MAGIC, meta, tensors)


def load_fine_stack(path) -> list:
    meta, tensors = read_container(path, FINE_MAGIC)
    levels = [int(x) for x in meta.pop("levels").split(",")]
    out = []
    for level in levels:
        shape = FineShape.from_meta({**meta, "level": str(level)})
        prefix = f"L{level}."
        out.append(FineLm(shape, {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}))
    return out
