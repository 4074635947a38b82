import numpy as np
import pytest

from probcast.dataset import ForecastArchive, SyntheticLaw, generate_synthetic


@pytest.fixture(scope="session")
def law():
    return SyntheticLaw()


@pytest.fixture(scope="session")
def small_archive(law):
    return generate_synthetic(law, (2, 40, 10), seed=3)


def random_archive(rng, stations=1, days=30, leads=6, excluded=(), ties=False):
    """Physically valid archive with arbitrary (not law-driven) values.

    With ``ties=True`` forecasts are drawn from a coarse grid so that equal
    distances are common.
    """
    shape = (stations, days, leads)
    if ties:
        ws = rng.integers(0, 3, shape).astype(float)
        wd = rng.integers(0, 3, shape) * 0.5
        t = 280.0 + rng.integers(0, 3, shape)
        p = 1e5 + 10.0 * rng.integers(0, 3, shape)
    else:
        ws = rng.uniform(0, 20, shape)
        wd = rng.uniform(0, 2 * np.pi, shape)
        t = rng.normal(285, 5, shape)
        p = rng.normal(1e5, 500, shape)
    fc = np.stack([ws, wd, t, p], axis=-1)
    ob = np.stack(
        [rng.uniform(0, 20, shape), rng.uniform(0, 2 * np.pi, shape), rng.normal(285, 5, shape), rng.normal(1e5, 500, shape)],
        axis=-1,
    )
    return ForecastArchive(fc, ob, excluded_leads=frozenset(excluded))


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; also asserts ``ok``."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
