import numpy as np
import pytest

from epicalib import calibrate as cal
from epicalib import ensemble, pca, surrogate
from epicalib.simcore import DEFAULT_BOX, MsaProfile


def small_profiles():
    return [
        MsaProfile("TST001", 800_000, 400, 0.95),
        MsaProfile("TST002", 1_200_000, 600, 1.0),
        MsaProfile("TST003", 2_000_000, 1000, 1.05),
        MsaProfile("TST004", 900_000, 450, 0.98),
        MsaProfile("TST005", 1_500_000, 750, 1.02),
        MsaProfile("TST006", 3_000_000, 1500, 1.08),
    ]


@pytest.fixture(scope="session")
def small_dataset():
    return ensemble.generate_ensemble(small_profiles(), runs_per_msa=60, seed=101)


@pytest.fixture(scope="session")
def small_basis(small_dataset):
    mask = small_dataset.record_mask(split=ensemble.TRAIN)
    return pca.fit(small_dataset.normalized[mask], k=10)


@pytest.fixture(scope="session")
def small_model(small_dataset, small_basis):
    cfg = surrogate.TrainConfig(epochs=60, batch_size=32, seed=7)
    return surrogate.train(small_dataset, small_basis, cfg)


@pytest.fixture(scope="session")
def small_prior(small_dataset):
    return cal.fit_prior_from_dataset(small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def box():
    return DEFAULT_BOX


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.LINES:
            terminalreporter.write_line(line)
