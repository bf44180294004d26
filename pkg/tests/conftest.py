import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture(scope="session")
def small_spec():
    from bnfair.data import DatasetSpec
    return DatasetSpec(n_train=600, n_test=300, feature_dim=12, latent_dim=6,
                       marginals=[0.3, 0.45, 0.2, 0.4], names=["a", "b", "c", "d"], seed=3)


@pytest.fixture(scope="session")
def small_data(small_spec):
    from bnfair.data import generate_dataset
    return generate_dataset(small_spec)


@pytest.fixture(scope="session")
def small_backbone():
    from bnfair.nn import BackboneSpec, ResidualBlockSpec
    return BackboneSpec(input_dim=12, width=16, embedding_dim=16,
                        blocks=[ResidualBlockSpec(16, "Projection"), ResidualBlockSpec(16),
                                ResidualBlockSpec(16, "Projection")])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
