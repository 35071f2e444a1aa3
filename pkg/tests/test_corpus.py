import numpy as np
import pytest

from nacanon import corpus, evaluation
from nacanon.config import Config
from nacanon.dsp import FrameSpec, estimate_f0


def test_speaker_params_deterministic_and_in_range():
    assert corpus.generate_speaker(1, 4) == corpus.generate_speaker(1, 4)
    ids = {corpus.generate_speaker(1, i).speaker_id for i in range(20)}
    assert len(ids) == 20
    for seed in range(5):
        for i in range(40):
            assert 90 <= corpus.generate_speaker(seed, i).base_f0_hz <= 300


def test_script_durations():
    s = corpus.generate_script(np.random.default_rng(0), 12, 150)
    assert min(s.durations) >= 3 and s.num_frames >= 150
    assert len(s.frame_labels()) == s.num_frames
    with pytest.raises(ValueError):
        corpus.ContentScript((1,), (2,))


def test_utterance_length_formula_and_determinism():
    spk = corpus.generate_speaker(1, 0)
    script = corpus.ContentScript((0, 1, 2, 3, 4, 5, 6), (7, 7, 7, 7, 7, 7, 7))
    w1, lab = corpus.synthesize_utterance(spk, script, 9)
    w2, _ = corpus.synthesize_utterance(spk, script, 9)
    assert len(w1) == 16000
    assert len(lab) == 49
    assert np.array_equal(w1.samples, w2.samples)


@pytest.mark.parametrize("index", [0, 5, 11, 17])
def test_median_f0_near_base(index):
    spk = corpus.generate_speaker(1, index)
    script = corpus.generate_script(np.random.default_rng(index), 12, 150)
    w, _ = corpus.synthesize_utterance(spk, script, index)
    c = estimate_f0(w, FrameSpec(640, 320))
    assert abs(np.median(c.f0_hz[c.voiced]) - spk.base_f0_hz) <= 0.1 * spk.base_f0_hz


def test_default_corpus_shape(default_corpus):
    assert len(default_corpus) == 200
    assert len({u.speaker_id for u in default_corpus}) == 20
    assert len({u.utt_id for u in default_corpus}) == 200


def test_manifest_roundtrip(small_corpus, tmp_path):
    manifest = corpus.write_corpus(small_corpus[:4], tmp_path)
    back = corpus.read_manifest(manifest)
    assert [u.utt_id for u in back] == [u.utt_id for u in small_corpus[:4]]
    for a, b in zip(back, small_corpus):
        assert np.array_equal(a.labels, b.labels)
        assert np.max(np.abs(a.waveform.samples - b.waveform.samples)) <= 1 / 32768
    for line in manifest.read_text().splitlines():
        assert len(line.split("\t")) == 4


def test_split_is_by_speaker(small_corpus_split, small_config):
    sp = small_corpus_split
    ext = {u.speaker_id for u in sp["external"]}
    evs = {u.speaker_id for u in sp["enroll"]} | {u.speaker_id for u in sp["trial"]}
    assert len(ext) == small_config.pool_speakers and not ext & evs
    assert len(sp["enroll"]) == len(evs) * small_config.enroll_per_speaker


def test_separability_floor(default_corpus):
    """Plain mean-embedding cosine scoring on original data: EER < 0.10."""
    split = corpus.split_corpus(default_corpus, Config())
    triple = lambda us: [(u.utt_id, u.speaker_id, u.waveform) for u in us]
    res = evaluation.score_trials(triple(split["external"]), triple(split["enroll"]), triple(split["trial"]))
    assert res.eer < 0.10


def test_content_learnable(default_corpus):
    items = [(u.waveform, u.labels) for u in default_corpus[::4]]
    clf = evaluation.ContentClassifier.fit(items)
    assert evaluation.content_error_rate(clf, items) < 0.05
