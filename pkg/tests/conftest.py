import numpy as np
import pytest

from stackgrowth import solver, stacks

KEY = bytes(range(32))
KEY0 = bytes(32)


@pytest.fixture(scope="session", autouse=True)
def warm_jit():
    # compile the jitted kernels once so individual test timings are honest
    solver.solve(stacks.PeriodicStack("WNES"), 64)
    solver.solve(stacks.IdlaStack(KEY0, 1), 64)
    solver.solve(stacks.LowDiscrepancyStack(KEY0, 1), 64)


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)
