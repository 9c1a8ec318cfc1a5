import numpy as np
import pytest

from bfgseg.config import RunConfig, set_key
from bfgseg.dataset import in_memory_dataset

# a dataset small enough to build in well under a second, but with eligible
# blocks for every class of both splits
SMALL = {"data.n_scenes": 8, "data.scene_points": 8000, "trainer.iterations": 6,
         "trainer.checkpoint_every": 3, "eval.episodes": 4}


def small_run(**extra):
    run = RunConfig()
    for k, v in {**SMALL, **extra}.items():
        set_key(run, k, str(v))
    return run.validate()


@pytest.fixture(scope="session")
def run_small():
    return small_run()


@pytest.fixture(scope="session")
def blocks_small(run_small):
    return in_memory_dataset(run_small.data)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
