import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from sselearn.corpus import SynthConfig, generate_synthetic_corpus
from sselearn.features import FeatureStore, compute_mfcc
from sselearn.corpus import read_audio

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("repo")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Four short synthetic files, shared read-only across tests."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(file_duration_s=4.0)
    return generate_synthetic_corpus(4, 8, 3, out, config=cfg)


@pytest.fixture(scope="session")
def small_store(small_corpus):
    store = FeatureStore(100.0)
    waves = {}
    for e in small_corpus:
        w = read_audio(e)
        waves[e.file_id] = w
        store.add_file(e.file_id, compute_mfcc(w))
    return store, waves


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
