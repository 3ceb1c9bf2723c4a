import numpy as np
import pytest

from featfnn import dataset, training
from featfnn.features import CATALOG

# Desk-scale setting shared by the training, voting and acceptance tests:
# L=4 labels, 200 images of 64x64, features R,G,B, k=2 modules, r=1.
DESK = dict(label_count=4, per_label=50, size=64, seed=0, noise=60.0, separation=0.02)
SGD = training.SgdConfig(max_epochs=100)
GDT = training.GdtConfig()


@pytest.fixture(scope="session")
def desk_dataset():
    return dataset.synthetic_dataset(**DESK)


@pytest.fixture(scope="session")
def desk_features():
    return list(CATALOG[:3])


@pytest.fixture(scope="session")
def desk_batches(desk_dataset, desk_features):
    return dataset.build_featured_batches(desk_dataset, desk_features, 2, 1)


@pytest.fixture(scope="session")
def desk_model(desk_dataset, desk_features):
    return training.train_proto_model(desk_dataset, (256,), desk_features, 2, 1, "T", SGD, GDT, seed=0)


@pytest.fixture(scope="session")
def single_module_model(desk_dataset, desk_features):
    return training.train_proto_model(desk_dataset, (256,), desk_features, 1, 1, "T", SGD, GDT, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (title, passed); filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title}")
