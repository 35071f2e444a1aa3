import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nacanon.config import Config, ConfigError, describe_keys


def test_text_roundtrip_defaults():
    c = Config()
    assert Config.from_text(c.to_text()) == c


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(2, 16), st.floats(0.0, 2.0, allow_nan=False), st.integers(0, 2**31 - 1))
def test_text_roundtrip_overrides(n_s, q, temperature, seed):
    c = Config().with_overrides(n_s=n_s, q=q, q_coarse=1, temperature=temperature, anon_seed=seed)
    assert Config.from_text(c.to_text()) == c


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        Config.from_text("n_s=8\nbogus=1\n")
    with pytest.raises(ConfigError):
        Config().with_overrides(bogus=1)


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        Config.from_text("n_s=eight\n")
    with pytest.raises(ConfigError):
        Config.from_text("just text\n")
    with pytest.raises(ConfigError):
        Config(q=2, q_coarse=2)
    with pytest.raises(ConfigError):
        Config(ac_hop=160)


def test_comments_and_blank_lines():
    assert Config.from_text("# a comment\n\nn_q=16  # inline\n").n_q == 16


def test_every_key_documented():
    text = describe_keys()
    for f in dataclasses.fields(Config):
        assert f"{f.name}=" in text
        assert f.metadata["doc"]


def test_desk_defaults():
    c = Config()
    assert (c.q, c.q_coarse) == (8, 2)
    assert c.sem_hop == c.ac_hop == 320
    assert c.n_speakers * c.utts_per_speaker == 200
