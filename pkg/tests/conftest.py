from pathlib import Path

import numpy as np
import pytest

from sparsepose.geom import (
    ORTHOGRAPHIC, PERSPECTIVE, ModelParams, PoseDictionary, chain_skeleton, human15,
)
from sparsepose.io import read_dictionary
from sparsepose.solvers import so3_exp, skew

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def dict16() -> PoseDictionary:
    """k=16 dictionary learned from 2000 built-in training poses (seed 1)."""
    return read_dictionary(FIXTURES / "dict_k16.json")


def random_rotations(rng, n):
    return so3_exp(skew(rng.standard_normal((n, 3, 3)) * 2.0))


def small_dictionary(rng, k=4, p=5, scale=1.0) -> PoseDictionary:
    atoms = rng.standard_normal((k, 3, p))
    atoms /= np.linalg.norm(atoms.reshape(k, -1), axis=1)[:, None, None]
    return PoseDictionary(chain_skeleton(p), atoms * scale, scale, 1.0,
                          rng.standard_normal(k))


def random_params(rng, dictionary, n, camera=ORTHOGRAPHIC, depth=10.0) -> ModelParams:
    C = rng.standard_normal((dictionary.k, n))
    R = random_rotations(rng, n)
    if camera == ORTHOGRAPHIC:
        return ModelParams(C, R, rng.standard_normal((n, 2)), None, ORTHOGRAPHIC)
    T = np.column_stack([rng.standard_normal((n, 2)), np.full(n, depth)])
    Z = 1.0 + 0.1 * rng.standard_normal((n, dictionary.p))
    Z[:, dictionary.skeleton.root_index] = 1.0
    return ModelParams(C, R, T, Z, PERSPECTIVE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def skeleton15():
    return human15()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS = {}


def record_criterion(number: int, ok: bool, detail: str):
    ACCEPTANCE_RESULTS[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
