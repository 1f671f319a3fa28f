import pytest
from hypothesis import HealthCheck, settings

from fedreview.data import SyntheticTaskSpec, synth_generate
from fedreview.model import ModelGeometry, init_weights

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy():
    return ModelGeometry.preset("toy")


@pytest.fixture(scope="session")
def base(toy):
    return init_weights(toy, 42)


@pytest.fixture(scope="session")
def synth_spec():
    return SyntheticTaskSpec(seed=42)


@pytest.fixture(scope="session")
def vocab(synth_spec):
    return synth_spec.vocabulary()


@pytest.fixture(scope="session")
def corpora(synth_spec):
    return synth_generate(synth_spec, 600, 200)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
