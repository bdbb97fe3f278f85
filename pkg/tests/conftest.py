import numpy as np
import pytest

from egovit import tiny_config
from egovit.features import SyntheticSpec, generate_synthetic_dataset, stack_clips


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def synth_clips():
    return generate_synthetic_dataset(SyntheticSpec())


@pytest.fixture(scope="session")
def synth_batch(synth_clips):
    return stack_clips(synth_clips)


_acceptance_lines = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        for key, value in report.user_properties:
            if key == "acceptance":
                _acceptance_lines.append(f"{'PASS' if report.passed else 'FAIL'}  {value}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
