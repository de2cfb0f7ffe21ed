import numpy as np
import pytest

from dqrise.demos import generate_corpus, hand_states
from dqrise.quantizer import ResidualVQVAE
from dqrise.relaxation import reindex_codes


@pytest.fixture(scope="session")
def hooklid_corpus():
    demos, _ = generate_corpus("hooklid", n=10, seed=0)
    return demos


@pytest.fixture(scope="session")
def default_corpus():
    demos, _ = generate_corpus("hooklid", n=50, seed=0)
    return demos


@pytest.fixture(scope="session")
def default_vqs(default_corpus):
    """Default-configuration quantizers for seeds 0, 1, 2."""
    H = hand_states(default_corpus)
    return [ResidualVQVAE(random_state=s).fit(H) for s in range(3)]


@pytest.fixture(scope="session")
def small_vq(hooklid_corpus):
    H = hand_states(hooklid_corpus)
    return ResidualVQVAE(hidden_dim=16, epochs=30, random_state=0).fit(H)


@pytest.fixture(scope="session")
def small_codebook(small_vq, hooklid_corpus):
    return reindex_codes(small_vq.code_table(), hand_states(hooklid_corpus))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(mod.RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} ({title}): {status} - {detail}")
