import numpy as np
import pytest
from hypothesis import settings

from spq import harness

settings.register_profile("spq", max_examples=60, deadline=None)
settings.load_profile("spq")

# small enough for fast tests, large enough that SVD and pruning both engage
SMALL_SPEC = harness.ToyModelSpec(vocab=32, d_model=32, n_layers=2, n_heads=4, d_ff=64,
                                  seed=3, attn_spectrum_decay=3.0)


@pytest.fixture(scope="session")
def small_model():
    return harness.build_toy_model(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_stats(small_model):
    return harness.collect_stats(small_model, harness.token_batches(SMALL_SPEC.vocab, 4, 32, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
