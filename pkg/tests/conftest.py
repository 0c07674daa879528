import numpy as np
import pytest

from poolsynth.data import load_dataset, select_classes, take_per_class
from poolsynth.models import TrainHP, build_model
from poolsynth.pool import generate_prior_pool


@pytest.fixture(scope="session")
def grid():
    return load_dataset("gauss-grid-train")


@pytest.fixture(scope="session")
def grid_test():
    return load_dataset("gauss-grid-test")


@pytest.fixture(scope="session")
def toy():
    return load_dataset("toy-2class")


@pytest.fixture(scope="session")
def grid_small(grid):
    return take_per_class(grid, 25, seed=0)


@pytest.fixture(scope="session")
def pair(grid):
    """Two-class slice of the grid fixture."""
    return select_classes(grid, (0, 1))


@pytest.fixture(scope="session")
def toy_pool(grid_small, tmp_path_factory):
    """Three toy-bn1 checkpoints of one short trajectory (stages 1, 3, 5)."""
    base = build_model("toy-bn1", 4, seed=0, input_shape=grid_small.image_shape)
    hp = TrainHP(lr=0.05, batch_size=20, seed=1)
    pool = generate_prior_pool(base, grid_small, 1, 5, 2, hp, tmp_path_factory.mktemp("toy_pool"))
    pool.models()
    return pool


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, passed, detail):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        line = f"criterion {number}: {status} {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
