import sys

import pytest

from emorag.corpus import build_fixture
from emorag.fusion import ModelConfig
from emorag.promptgen import MockLLMClient, generate_batch, requests_for_samples
from emorag.retrieval import HashingProvider, build_index, precompute_cache


@pytest.fixture(scope="session")
def fixture7():
    return build_fixture(7, 200, 200)


@pytest.fixture(scope="session")
def index7(fixture7):
    return build_index(fixture7.records, HashingProvider())


@pytest.fixture(scope="session")
def cache7(fixture7, index7):
    return precompute_cache(fixture7.samples, index7, HashingProvider(), 5)


@pytest.fixture(scope="session")
def prompts7(fixture7, cache7):
    requests = requests_for_samples(fixture7.samples, cache7, fixture7.records)
    return generate_batch(requests, MockLLMClient(), [s.id for s in fixture7.samples])


@pytest.fixture(scope="session")
def small_fixture():
    return build_fixture(3, 12, 40, d_a=5, d_v=4)


@pytest.fixture()
def tiny_config():
    return ModelConfig(audio_dim=5, video_dim=4, d_model=8, n_heads=2, text_vocab_hash_dim=64, max_frames=16)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
