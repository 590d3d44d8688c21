import numpy as np
import pytest

from cape.datagen import augment_starts, generate_dataset
from cape.denoiser import TrainingConfig, init_params, train
from cape.schedule import make_schedule


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture(scope="session")
def default_dataset():
    return augment_starts(generate_dataset(), 1, seed=1)


@pytest.fixture(scope="session")
def trained(default_dataset, sched):
    """The default pipeline: 1000 demonstrations plus one augmentation each, default training settings."""
    return train(default_dataset, TrainingConfig(), sched)


@pytest.fixture(scope="session")
def model(trained):
    return trained.params


@pytest.fixture
def tiny_params():
    """Small random network (about 1.5k parameters) for gradient and oracle checks."""
    p = init_params(N=4, d=2, T=25, lo=[0.0, 0.0], hi=[1.0, 1.0], hidden=8, depth=2, time_dim=4, seed=3,
                    zero_output=False)
    rng = np.random.default_rng(11)
    p.flat[:] = rng.normal(0.0, 0.3, size=p.size)
    return p


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
