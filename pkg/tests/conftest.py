import numpy as np
import pytest

from rfixfel.datagen import default_truth, generate_dataset
from rfixfel.xfel import DetectorGrid

_ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    """50 images of a 4-ball object on a 12x12 grid."""
    truth = default_truth(n_balls=4, seed=3)
    return generate_dataset(truth, 50, DetectorGrid(12, 12, 0.5), 15.0, seed=3)


def rotated_spd(eigs, seed):
    """Symmetric matrix with the given spectrum and a seeded random eigenbasis."""
    Q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(len(eigs), len(eigs))))
    A = Q @ np.diag(eigs) @ Q.T
    return (A + A.T) / 2


def affine_config(**overrides):
    """Two quadratic terms in 3-D sharing the fixed point x* = (1, -2, 0.5)."""
    from rfixfel.config import AffineSpec, InitSpec, RunConfig
    mats = (np.diag([1.0, 0.5, 0.8]), rotated_spd([0.6, 0.9, 1.0], 0))
    affine = AffineSpec(tuple(tuple(tuple(float(v) for v in row) for row in A) for A in mats), (1.0, -2.0, 0.5))
    base = dict(problem="affine", affine=affine, batch_size=1, q=1, r=1, step=0.1, n_outer=200,
                n_chains=200, seed=5, snapshot_every=1, init=InitSpec("box", -3.0, 3.0))
    base.update(overrides)
    return RunConfig(**base)
