import numpy as np
import pytest
import torch

torch.use_deterministic_algorithms(True)


def random_dictionary(rng, T, V):
    U = rng.standard_normal((T, V))
    return U / np.linalg.norm(U, axis=0)


def random_spd(rng, T, floor=0.1):
    A = rng.standard_normal((T, T))
    return A @ A.T + floor * np.eye(T)


# -- acceptance reporting -----------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        _CRITERIA[number] = (bool(ok), detail)
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}")
