import numpy as np
import pytest

from perftrack.model import ParamVector, Topology, evaluate_observation


def example_params() -> ParamVector:
    return ParamVector(
        u0=[0.1, 0.05],
        d=[0.005, 0.01, 0.002],
        S=[[0.01, 0.02], [0.02, 0.01], [0.005, 0.015]],
    )


EXAMPLE_LAMBDA = np.array([10.0, 5.0, 20.0])


@pytest.fixture
def params():
    return example_params()


@pytest.fixture
def topo():
    return Topology(2, 3, (1, 1))


@pytest.fixture
def lam():
    return EXAMPLE_LAMBDA.copy()


def random_feasible(rng, M=2, C=3, max_util=0.9):
    """Random parameters, workload and topology with every tier below ``max_util``."""
    while True:
        reps = tuple(int(v) for v in rng.integers(1, 4, size=M))
        topo = Topology(M, C, reps)
        x = ParamVector(
            rng.uniform(0.0, 0.2, M),
            rng.uniform(0.0, 0.05, C),
            rng.uniform(0.001, 0.03, (C, M)),
        )
        lam = rng.uniform(0.0, 20.0, C)
        u = x.u0 + lam @ x.S / np.asarray(reps)
        if np.all(u < max_util):
            return x, lam, topo


def central_diff(x: ParamVector, lam, topo: Topology, rel: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of the flattened observation.

    The step is relative to each entry (floored at 1e-3 for zeros); 1e-4
    balances truncation against rounding for parameters of this size.
    """
    flat = x.flatten()
    M, C = topo.num_tiers, topo.num_classes
    cols = []
    for k in range(flat.size):
        h = rel * max(abs(flat[k]), 1e-3)
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        zu = evaluate_observation(ParamVector.from_flat(up, M, C), lam, topo).flatten()
        zd = evaluate_observation(ParamVector.from_flat(dn, M, C), lam, topo).flatten()
        cols.append((zu - zd) / (2 * h))
    return np.array(cols).T


# -- acceptance report ------------------------------------------------------

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number} ({name}): {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
