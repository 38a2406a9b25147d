import numpy as np
import pytest

from tripletrank.corpus import CorpusConfig, generate_corpus
from tripletrank.oracle import rank_all


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(n_tracks=40, n_tags=8, patch_freq_bins=8,
                                        patch_frames=16, tags_per_track=(2, 4), seed=3))


@pytest.fixture(scope="session")
def small_rankings(small_corpus):
    return rank_all(small_corpus.tags_map())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def record_criterion():
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(label: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[label] = f"criterion {label}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(ACCEPTANCE_LINES[label])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for label in sorted(ACCEPTANCE_LINES, key=lambda s: (int("".join(c for c in s if c.isdigit())), s)):
            terminalreporter.write_line(ACCEPTANCE_LINES[label])
