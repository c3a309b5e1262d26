import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from photosketch.synthetic import write_corpus  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory):
    """2 categories x 2 photos x 5 sketches, train split, with the true fields."""
    root = tmp_path_factory.mktemp("corpus")
    truth = write_corpus(root, categories=2, photos_per_category=2, sketches_per_photo=5, split="train", seed=0)
    return root, truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
