import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Lines recorded by the acceptance suite, echoed in the terminal summary.
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy():
    from voicemorph.synthesis import toy_backends

    return toy_backends()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    from voicemorph.toy_corpus import write_toy_corpus

    root = tmp_path_factory.mktemp("corpus")
    voices = write_toy_corpus(root, n_female=3, n_male=3, clips_per_speaker=2,
                              clip_seconds=6.0, seed=7)
    return root, voices
