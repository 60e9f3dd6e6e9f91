import numpy as np
import pytest

from fmae.data import SyntheticFleetConfig, fit_normalizer, generate_synthetic_fleet
from fmae.types import SnippetGroup

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_fleet():
    return generate_synthetic_fleet(SyntheticFleetConfig(n_sources=6, snippets_per_source=12, kind="ev", seed=7,
                                                         anomaly_fraction=0.5))


@pytest.fixture(scope="session")
def lab_fleet():
    return generate_synthetic_fleet(SyntheticFleetConfig(n_sources=6, snippets_per_source=30, kind="lab", seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def normalized_group(small_fleet):
    """Five normalized snippets of one EV source."""
    norm = fit_normalizer(small_fleet.snippets)
    snips = small_fleet.by_source()[small_fleet.sources()[0]][:5]
    return SnippetGroup(tuple(norm.apply(s) for s in snips), snips[0].source_id)

