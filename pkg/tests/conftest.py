from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("dtgspl", max_examples=60, deadline=None)
settings.load_profile("dtgspl")

GOLDEN = Path(__file__).parent / "golden"
ACCEPTANCE: list[str] = []
FIXTURES = Path(__file__).parent / "fixtures"


def pytest_addoption(parser):
    parser.addoption("--regolden", action="store_true", help="rewrite golden files from the current code")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def regolden(request) -> bool:
    return bool(request.config.getoption("--regolden"))


@pytest.fixture(scope="session")
def golden(regolden):
    """``golden(name, text)`` compares ``text`` with tests/golden/<name> (or rewrites it)."""

    def check(name: str, text: str) -> str:
        path = GOLDEN / name
        if regolden or not path.exists():
            GOLDEN.mkdir(exist_ok=True)
            path.write_text(text)
        return path.read_text()

    return check


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def reference_runs():
    """Full model and the two headline ablations on the default benchmark (several minutes)."""
    from dtgspl import harness

    cfg = harness.RunConfig()
    return {
        "full": harness.train(cfg),
        "no_epr": harness.train(cfg, no_epr=True),
        "no_reconstruction": harness.train(cfg, no_reconstruction=True),
    }


@pytest.fixture(scope="session")
def tiny_samples():
    """Two training views on 16 clips, small enough for exhaustive gradient checks."""
    from dtgspl.synth import SynthConfig, gen_dataset

    cfg = SynthConfig(n_samples=2, t_v=16, d_v=4, positives=(1, 2, 3))
    return list(gen_dataset(cfg, 3).training_view())


@pytest.fixture(scope="session")
def small_config_path() -> Path:
    return FIXTURES / "small.yaml"


@pytest.fixture(scope="session")
def small_config(small_config_path):
    from dtgspl import harness

    return harness.load_config(small_config_path)
