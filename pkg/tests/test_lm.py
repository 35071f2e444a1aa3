import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nacanon import lm
from nacanon.codec import AcousticTokens
from nacanon.semantic import SemanticTokens

from helpers import NQ, NS, finite_difference_check, random_seq, small_coarse, small_fine


# ---------------------------------------------------------------- flattening


def test_flatten_documented_example():
    s = SemanticTokens([7], 10)
    prompt = AcousticTokens([[1], [2]], 4)
    target = AcousticTokens([[0, 2], [3, 1]], 4)
    seq = lm.flatten_coarse(s, prompt, target, 2)
    assert seq.ids.tolist() == [7, 11, 16, 10, 17, 12, 15]
    assert seq.segments.tolist() == [0, 1, 1, 2, 2, 2, 2]


def test_flatten_empty_target_ends_after_prompt():
    seq = lm.flatten_coarse(SemanticTokens([3, 4], 10), AcousticTokens([[1], [2]], 4),
                            AcousticTokens(np.zeros((2, 0), dtype=int), 4), 2)
    assert len(seq) == 4
    assert seq.segments[-1] == lm.PROMPT_COARSE


def test_flatten_row_mismatch():
    with pytest.raises(lm.RowCountError):
        lm.flatten_coarse(SemanticTokens([1], 10), AcousticTokens([[1]], 4), AcousticTokens([[1], [2]], 4), 2)


def test_token_sequence_rejects_segment_disorder():
    with pytest.raises(ValueError):
        lm.TokenSequence([1, 2], [lm.TARGET_COARSE, lm.SEMANTIC])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(0, 6), st.integers(0, 6), st.integers(0, 6))
def test_unflatten_inverts_flatten(seed, qc, ts, tp, ta):
    rng = np.random.default_rng(seed)
    n_s, n_q, q = int(rng.integers(1, 50)), int(rng.integers(1, 50)), qc + int(rng.integers(0, 3))
    s = SemanticTokens(rng.integers(0, n_s, ts), n_s)
    p = AcousticTokens(rng.integers(0, n_q, (q, tp)), n_q)
    a = AcousticTokens(rng.integers(0, n_q, (q, ta)), n_q)
    s2, p2, a2 = lm.unflatten_coarse(lm.flatten_coarse(s, p, a, qc), qc, n_s, n_q)
    assert np.array_equal(s2.tokens, s.tokens)
    assert np.array_equal(p2.grid, p.grid[:qc])
    assert np.array_equal(a2.grid, a.grid[:qc])


# ---------------------------------------------------------------- coarse forward


def test_coarse_rows_are_distributions():
    rng = np.random.default_rng(0)
    probs = lm.coarse_forward(small_coarse(), random_seq(rng))
    assert probs.shape[1] == NS + 2 * NQ
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_zero_output_projection_is_uniform():
    model = small_coarse()
    model.params["w_out"][:] = 0.0
    probs = lm.coarse_forward(model, random_seq(np.random.default_rng(1)))
    assert np.allclose(probs, 1.0 / model.shape.vocab)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coarse_is_causal(seed):
    rng = np.random.default_rng(seed)
    model = small_coarse(seed=seed % 7)
    seq = random_seq(rng)
    cut = int(rng.integers(1, len(seq)))
    ids = seq.ids.copy()
    # redraw every token from position ``cut`` on, staying inside each token's vocabulary block
    for i in range(cut, len(ids)):
        if seq.segments[i] == lm.SEMANTIC:
            ids[i] = rng.integers(0, NS)
        else:
            ids[i] = NS + ((ids[i] - NS) // NQ) * NQ + rng.integers(0, NQ)
    a = lm.coarse_forward(model, seq)
    b = lm.coarse_forward(model, lm.TokenSequence(ids, seq.segments))
    assert np.array_equal(a[:cut], b[:cut])


def test_perturbing_last_token_keeps_earlier_rows():
    rng = np.random.default_rng(3)
    model = small_coarse()
    seq = random_seq(rng)
    ids = seq.ids.copy()
    ids[-1] = NS + NQ + (ids[-1] - NS - NQ + 1) % NQ
    a = lm.coarse_forward(model, seq)
    b = lm.coarse_forward(model, lm.TokenSequence(ids, seq.segments))
    assert np.array_equal(a[:-1], b[:-1])


def test_capacity_error():
    model = small_coarse(positions=8)
    with pytest.raises(lm.CapacityError):
        lm.coarse_forward(model, random_seq(np.random.default_rng(0)))


# ---------------------------------------------------------------- training


def test_coarse_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    batch = [random_seq(rng) for _ in range(3)] + [random_seq(rng, t=4, tp=2)]
    worst = finite_difference_check(small_coarse(), lm.coarse_loss_and_grads, batch, rng)
    assert max(worst.values()) < 1e-3, worst


def test_fine_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    batch = [lm.FineExample(rng.integers(0, NQ, (4, 3)), rng.integers(0, NQ, (4, 5))) for _ in range(3)]
    worst = finite_difference_check(small_fine(), lm.fine_loss_and_grads, batch, rng)
    assert max(worst.values()) < 1e-3, worst


def test_fine_gradients_without_positions():
    rng = np.random.default_rng(7)
    batch = [lm.FineExample(rng.integers(0, NQ, (4, 3)), rng.integers(0, NQ, (4, 5)))]
    model = small_fine(use_positions=False)
    worst = finite_difference_check(model, lm.fine_loss_and_grads, batch, rng)
    assert max(worst.values()) < 1e-3, worst


def test_coarse_overfits_single_batch():
    rng = np.random.default_rng(8)
    batch = [random_seq(rng) for _ in range(4)]
    trace = lm.train_coarse(small_coarse(), batch, 0.05, 200)
    assert trace[-1] < 0.1 * trace[0]


def test_fine_overfits_single_batch():
    rng = np.random.default_rng(9)
    batch = [lm.FineExample(rng.integers(0, NQ, (4, 3)), rng.integers(0, NQ, (4, 5))) for _ in range(3)]
    trace = lm.train_fine(small_fine(), batch, 0.05, 200)
    assert trace[-1] < 0.1 * trace[0]


def test_zero_learning_rate_keeps_loss_constant():
    rng = np.random.default_rng(10)
    batch = [random_seq(rng) for _ in range(2)]
    trace = lm.train_coarse(small_coarse(), batch, 0.0, 5)
    assert np.all(trace == trace[0])


def test_nan_loss_raises_divergence_with_step():
    model = small_coarse()
    model.params["w_out"][0, 0] = np.nan
    with pytest.raises(lm.DivergenceError) as info:
        lm.train_coarse(model, [random_seq(np.random.default_rng(0))], 0.05, 3)
    assert info.value.step == 0


def test_initial_loss_on_random_labels_near_log_vocab():
    rng = np.random.default_rng(11)
    losses = []
    for seed in range(5):
        batch = [lm.FineExample(rng.integers(0, NQ, (4, 6)), rng.integers(0, NQ, (4, 8))) for _ in range(4)]
        losses.append(lm.fine_loss_and_grads(small_fine(seed=seed), batch)[0])
    assert np.mean(losses) >= np.log(NQ) - 0.1


# ---------------------------------------------------------------- sampling


@pytest.fixture(scope="module")
def rule_coarse():
    """Coarse model trained on sequences where target row 0 equals s mod N_Q."""
    ns, nq = 16, 8
    model = lm.init_coarse(lm.CoarseShape(ns, nq, 2, width=32, heads=4, blocks=2, positions=128, window=12), 1)

    def batch(step):
        out = []
        for i in range(8):
            rng = np.random.default_rng([5, step, i])
            s = rng.integers(0, ns, 12)
            target = np.stack([s % nq, rng.integers(0, nq, 12)])
            out.append(lm.flatten_coarse(SemanticTokens(s, ns), AcousticTokens(rng.integers(0, nq, (2, 6)), nq),
                                         AcousticTokens(target, nq), 2))
        return out

    lm.train_coarse(model, batch, 0.05, 250)
    return model


def test_coarse_learns_semantic_rule(rule_coarse):
    rng = np.random.default_rng(99)
    hits = total = 0
    for i in range(20):
        s = rng.integers(0, 16, 30)
        out = lm.sample_coarse(rule_coarse, SemanticTokens(s, 16), AcousticTokens(rng.integers(0, 8, (2, 6)), 8), 30, 0.7, i)
        hits += int(np.sum(out.grid[0] == s % 8))
        total += 30
    assert hits / total >= 0.95


def test_sampling_is_seeded(rule_coarse):
    rng = np.random.default_rng(1)
    s = SemanticTokens(rng.integers(0, 16, 20), 16)
    prompt = AcousticTokens(rng.integers(0, 8, (2, 6)), 8)
    a = lm.sample_coarse(rule_coarse, s, prompt, 20, 1.0, 42)
    b = lm.sample_coarse(rule_coarse, s, prompt, 20, 1.0, 42)
    assert np.array_equal(a.grid, b.grid)
    g0 = lm.sample_coarse(rule_coarse, s, prompt, 20, 0.0, 1)
    g1 = lm.sample_coarse(rule_coarse, s, prompt, 20, 0.0, 2)
    assert np.array_equal(g0.grid, g1.grid)


def test_sample_coarse_shape_and_chunking(rule_coarse):
    rng = np.random.default_rng(2)
    for t_a in (1, 5, 12, 13, 29):
        out = lm.sample_coarse(rule_coarse, SemanticTokens(rng.integers(0, 16, t_a), 16),
                               AcousticTokens(rng.integers(0, 8, (2, 6)), 8), t_a, 0.7, 0)
        assert out.grid.shape == (2, t_a)
        assert out.grid.min() >= 0 and out.grid.max() < 8


def test_cached_sampling_matches_full_forward(rule_coarse):
    """Greedy incremental decoding equals argmax of the full-sequence forward pass."""
    rng = np.random.default_rng(4)
    s = SemanticTokens(rng.integers(0, 16, 6), 16)
    prompt = AcousticTokens(rng.integers(0, 8, (2, 4)), 8)
    out = lm.sample_coarse(rule_coarse, s, prompt, 6, 0.0, 0)
    seq = lm.flatten_coarse(s, prompt, out, 2)
    probs = lm.coarse_forward(rule_coarse, seq)
    start = len(seq) - 12
    for j in range(12):
        lo = 16 + (j % 2) * 8
        assert np.argmax(probs[start - 1 + j, lo : lo + 8]) + lo == seq.ids[start + j]


@pytest.fixture(scope="module")
def rule_fine():
    """Level-2 fine model trained where row 2 always equals row 0."""
    model = lm.init_fine(lm.FineShape(8, 3, 2, width=32, heads=4, blocks=2, positions=128, window=12), 1)

    def batch(step):
        out = []
        for i in range(8):
            rng = np.random.default_rng([6, step, i])
            grid = rng.integers(0, 8, (3, 12))
            grid[2] = grid[0]
            out.append(lm.FineExample(rng.integers(0, 8, (3, 6)), grid))
        return out

    lm.train_fine(model, batch, 0.05, 200)
    return model


def test_fine_learns_copy_rule_and_keeps_coarse(rule_fine):
    rng = np.random.default_rng(98)
    hits = total = 0
    for i in range(20):
        coarse = rng.integers(0, 8, (2, 30))
        out = lm.sample_fine([rule_fine], AcousticTokens(rng.integers(0, 8, (3, 6)), 8), AcousticTokens(coarse, 8), 0.7, i)
        assert out.grid.shape == (3, 30)
        assert np.array_equal(out.grid[:2], coarse)
        hits += int(np.sum(out.grid[2] == coarse[0]))
        total += 30
    assert hits / total >= 0.95


def test_fine_missing_levels():
    model = small_fine(level=3, q=4)
    with pytest.raises(lm.LevelConfigError):
        lm.sample_fine([model], AcousticTokens(np.zeros((4, 3), int), NQ), AcousticTokens(np.zeros((2, 5), int), NQ), 0.7, 0)
    with pytest.raises(lm.LevelConfigError):
        lm.sample_fine([], AcousticTokens(np.zeros((4, 3), int), NQ), AcousticTokens(np.zeros((2, 5), int), NQ), 0.7, 0)


def test_fine_permutation_equivariance_without_positions():
    rng = np.random.default_rng(12)
    model = small_fine(use_positions=False)
    prompt = AcousticTokens(rng.integers(0, NQ, (4, 5)), NQ)
    lower = AcousticTokens(rng.integers(0, NQ, (2, 7)), NQ)
    perm_t = rng.permutation(7)
    perm_p = rng.permutation(5)
    a = lm.fine_forward(model, prompt, lower)
    b = lm.fine_forward(model, AcousticTokens(prompt.grid[:, perm_p], NQ), AcousticTokens(lower.grid[:, perm_t], NQ))
    assert np.allclose(a[perm_t], b, atol=1e-12)


def test_fine_rows_are_distributions():
    rng = np.random.default_rng(13)
    probs = lm.fine_forward(small_fine(), AcousticTokens(rng.integers(0, NQ, (4, 5)), NQ),
                            AcousticTokens(rng.integers(0, NQ, (2, 7)), NQ))
    assert probs.shape == (7, NQ)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- persistence


def test_coarse_save_load_roundtrip(tmp_path):
    model = small_coarse()
    lm.train_coarse(model, [random_seq(np.random.default_rng(0))], 0.05, 3)
    model.save(tmp_path / "a.clmq")
    loaded = lm.CoarseLm.load(tmp_path / "a.clmq")
    loaded.save(tmp_path / "b.clmq")
    assert (tmp_path / "a.clmq").read_bytes() == (tmp_path / "b.clmq").read_bytes()
    assert loaded.shape == model.shape
    seq = random_seq(np.random.default_rng(1))
    assert np.array_equal(lm.coarse_forward(model, seq), lm.coarse_forward(loaded, seq))


def test_fine_stack_roundtrip(tmp_path):
    models = [small_fine(level=2), small_fine(level=3)]
    lm.save_fine_stack(tmp_path / "f.flmq", models)
    loaded = lm.load_fine_stack(tmp_path / "f.flmq")
    assert [m.shape for m in loaded] == [m.shape for m in models]
    lm.save_fine_stack(tmp_path / "g.flmq", loaded)
    assert (tmp_path / "f.flmq").read_bytes() == (tmp_path / "g.flmq").read_bytes()


def test_wrong_magic_rejected(tmp_path):
    from nacanon.container import ContainerError

    small_coarse().save(tmp_path / "a.clmq")
    with pytest.raises(ContainerError):
        lm.FineLm.load(tmp_path / "a.clmq")
