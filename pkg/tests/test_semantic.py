import numpy as np
import pytest

from nacanon import semantic
from nacanon.config import Config
from nacanon.corpus import generate_script, generate_speaker, synthesize_utterance
from nacanon.dsp import Waveform
from nacanon.kmeans import InsufficientDataError


@pytest.fixture(scope="module")
def default_codebook(default_split):
    c = Config()
    feats = [semantic.semantic_features(u.waveform) for u in default_split["external"]]
    return semantic.train_semantic(feats, c.n_s, c.train_seed)


def test_one_codeword_is_mean():
    x = np.random.default_rng(0).normal(size=(40, 5))
    cb = semantic.train_semantic(x, 1, seed=0)
    assert np.allclose(cb.centroids[0], x.mean(axis=0), atol=1e-6)


def test_distinct_frames_quantize_exactly():
    support = np.random.default_rng(3).normal(size=(6, 5)) * 4
    x = np.repeat(support, 7, axis=0)
    cb = semantic.train_semantic(x, 6, seed=2)
    tok = semantic.tokenize_features(x, cb)
    assert np.max(np.abs(cb.centroids[tok.tokens] - x)) < 1e-5


def test_error_not_worse_than_variance(small_corpus):
    x = np.concatenate([semantic.semantic_features(u.waveform) for u in small_corpus])
    cb = semantic.train_semantic(x, 8, seed=0)
    err = np.mean(np.sum((x - cb.centroids[semantic.tokenize_features(x, cb).tokens]) ** 2, axis=1))
    assert err <= np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1))


def test_insufficient_data():
    with pytest.raises(InsufficientDataError):
        semantic.train_semantic(np.zeros((3, 4)), 4, seed=0)


def test_tokenize_length_determinism_and_range(default_codebook):
    rng = np.random.default_rng(0)
    w = Waveform(0.3 * np.sin(2 * np.pi * 160 * np.arange(16000) / 16000) + rng.normal(0, 0.01, 16000))
    a, b = semantic.tokenize(w, default_codebook), semantic.tokenize(w, default_codebook)
    assert len(a) == 49
    assert np.array_equal(a.tokens, b.tokens)
    assert a.tokens.min() >= 0 and a.tokens.max() < default_codebook.n_s


def test_dimension_mismatch(default_codebook):
    with pytest.raises(semantic.ModelMismatchError):
        semantic.tokenize_features(np.zeros((3, default_codebook.dim + 1)), default_codebook)


def test_same_content_matches_across_speakers(default_codebook):
    """Quantization bottleneck: identical scripts spoken by different voices share most tokens."""
    same, other = [], []
    for k in range(10):
        rng = np.random.default_rng(100 + k)
        script, script2 = generate_script(rng, 12, 150), generate_script(rng, 12, 150)
        a, b = rng.choice(20, 2, replace=False)
        wa, _ = synthesize_utterance(generate_speaker(1, a), script, 5)
        wb, _ = synthesize_utterance(generate_speaker(1, b), script, 6)
        wc, _ = synthesize_utterance(generate_speaker(1, b), script2, 7)
        ta, tb, tc = (semantic.tokenize(w, default_codebook).tokens for w in (wa, wb, wc))
        same.append(np.mean(ta == tb))
        n = min(len(ta), len(tc))
        other.append(np.mean(ta[:n] == tc[:n]))
    assert np.mean(same) >= 0.6
    assert np.mean(same) > np.mean(other)


def test_codebook_file_roundtrip(default_codebook, tmp_path):
    default_codebook.save(tmp_path / "a.semq")
    loaded = semantic.SemanticCodebook.load(tmp_path / "a.semq")
    loaded.save(tmp_path / "b.semq")
    assert (tmp_path / "a.semq").read_bytes() == (tmp_path / "b.semq").read_bytes()
    assert np.array_equal(loaded.centroids, default_codebook.centroids)
