import numpy as np
import pytest
from hypothesis import settings

from affnet.data import Dataset, SynthConfig, generate_synthetic

settings.register_profile("affnet", deadline=None, max_examples=40)
settings.load_profile("affnet")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """24 synthetic samples, 2 subjects; shared read-only across tests."""
    out = tmp_path_factory.mktemp("synth_small")
    cfg = SynthConfig(n_samples=24, n_subjects=2, seed=3)
    path, truth = generate_synthetic(cfg, out)
    return path, truth, cfg


@pytest.fixture
def small_dataset(small_synth):
    return Dataset.from_manifest(small_synth[0])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
