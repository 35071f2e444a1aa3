import pytest

from nacanon.config import Config
from nacanon.corpus import generate_corpus, split_corpus

SMALL = dict(n_speakers=6, utts_per_speaker=5, utt_frames=100, pool_speakers=3, enroll_per_speaker=2)

TINY = dict(
    SMALL,
    n_s=8,
    n_q=8,
    q=3,
    q_coarse=2,
    lm_width=16,
    lm_heads=2,
    lm_blocks=1,
    lm_window=16,
    prompt_len=20,
    coarse_steps=15,
    fine_steps=10,
    lm_batch=4,
)


@pytest.fixture(scope="session")
def small_config():
    return Config().with_overrides(**SMALL)


@pytest.fixture(scope="session")
def small_corpus(small_config):
    return generate_corpus(small_config)


@pytest.fixture(scope="session")
def small_corpus_split(small_corpus, small_config):
    return split_corpus(small_corpus, small_config)


@pytest.fixture(scope="session")
def tiny_config():
    return Config().with_overrides(**TINY)


@pytest.fixture(scope="session")
def tiny_system(tiny_config, small_corpus_split):
    """A quickly trained system; quality is irrelevant, only plumbing is exercised."""
    from nacanon.pipeline import train_system

    system, _ = train_system(tiny_config, small_corpus_split["external"])
    return system


@pytest.fixture(scope="session")
def default_corpus():
    """The default 20-speaker corpus; generated once per session."""
    return generate_corpus(Config())


@pytest.fixture(scope="session")
def default_split(default_corpus):
    return split_corpus(default_corpus, Config())


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
