import contextlib

import numpy as np
import pytest
from hypothesis import settings

from crystalscreen.crystal_core import Crystal
from crystalscreen.synthetic import make_benchmark, random_crystal

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def bench():
    return make_benchmark(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def nacl():
    # rocksalt primitive cell, a = 5.64 Å
    lat = 2.82 * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    return Crystal(np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]), (11, 17), lat, id="nacl")


def crystals_from_seed(seed, count, **kw):
    r = np.random.default_rng(seed)
    return [random_crystal(r, id=f"r{seed}-{i}", **kw) for i in range(count)]


# acceptance bookkeeping: one line per criterion, printed in the terminal summary
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number, title):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE[number] = (False, title, f"{info['detail']} {msg}".strip())
        raise
    ACCEPTANCE[number] = (True, title, info["detail"])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] #{n:>2} {title}: {detail}")
