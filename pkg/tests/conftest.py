import numpy as np
import pytest

from ervae.config import ExperimentConfig
from ervae.experiment import train_and_certify_embedding


@pytest.fixture(scope="session")
def certified_dir(tmp_path_factory):
    """Output root holding one WAE embedding trained with the default config."""
    out = tmp_path_factory.mktemp("wae")
    train_and_certify_embedding(ExperimentConfig(), out)
    return out


@pytest.fixture(scope="session")
def learned_embedding(certified_dir):
    from ervae.embedding import load_embedding
    from ervae.experiment import EMBEDDING_FILE

    return load_embedding(certified_dir / EMBEDDING_FILE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
