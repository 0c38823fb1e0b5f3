import sys

import numpy as np
import pytest

from decoylab.embednet import EmbedNet
from decoylab.numerics import make_rng
from decoylab.synthpeople import SynthDatasetSpec, generate

SMALL_SHAPE = (8, 8, 1)


@pytest.fixture(scope="session")
def small_model():
    return EmbedNet.from_seed(11, SMALL_SHAPE, hidden=12, dim=6)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(SynthDatasetSpec(n_identities=4, photos_per_identity=6, queries_per_identity=2,
                                     image_shape=(16, 16, 1), seed=5))


@pytest.fixture
def rng():
    return make_rng(1234, 0)


def random_image(rng, shape=SMALL_SHAPE, lo=0.1, hi=0.9):
    return rng.uniform(lo, hi, shape)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[n])
