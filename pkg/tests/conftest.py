import json
from importlib import resources

import pytest

from conjlab.conjugacy import ConjugacyEngine
from conjlab.dichotomy import ConstantsBundle
from conjlab.flow import FlowEngine
from conjlab.sysdsl import load_system, load_system_file

_LINES = []


def data_path(name):
    return str(resources.files("conjlab") / "data" / f"{name}.json")


def system(name):
    return load_system_file(data_path(name))


def inline_system(**cfg):
    """System from keyword config, with small defaults for tests."""
    base = {"dim": 1, "A": [["-1"]], "f": ["0"], "P0": [[1]], "horizon": 4}
    base.update(cfg)
    return load_system(json.dumps(base))


def _engine(name):
    s = system(name)
    return ConjugacyEngine(FlowEngine(s), ConstantsBundle.from_dict(s.constants))


@pytest.fixture(scope="session")
def s1():
    return system("s1")


@pytest.fixture(scope="session")
def s2():
    return system("s2")


@pytest.fixture(scope="session")
def ce_s1():
    return _engine("s1")


@pytest.fixture(scope="session")
def ce_s2():
    return _engine("s2")


@pytest.fixture(scope="session")
def ce_zero():
    return _engine("zero_f")


@pytest.fixture
def acceptance():
    """Record one pass/fail line per criterion; echoed again in the terminal summary."""
    def log(number, ok, text):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {text}"
        print(line)
        _LINES.append(line)
        return ok
    return log


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
