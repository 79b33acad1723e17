import numpy as np
import pytest

from tempq.diffusion import make_dataset, make_schedule, train
from tempq.model import Architecture, Denoiser

SMALL = Architecture(data_dim=2, hidden=16, temb_dim=8, n_blocks=2, T=12)

# criterion number -> (passed, detail), filled by the acceptance suite
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sched():
    return make_schedule(SMALL.T, 1e-3, 0.2)


@pytest.fixture(scope="session")
def small_model(small_sched):
    """A briefly trained small network (enough for non-trivial features)."""
    data = make_dataset("gaussian-mixture-8", count=2000, seed=0)
    return train(Denoiser(SMALL, seed=0), data, small_sched, steps=200, lr=0.1, seed=0, batch_size=128)


@pytest.fixture
def record():
    def _record(n: int, passed: bool, detail: str) -> bool:
        CRITERIA[n] = (bool(passed), detail)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
