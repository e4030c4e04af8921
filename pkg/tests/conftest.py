import numpy as np
import pytest

from cmdg.datagen import ScmConfig, generate_scm, split


@pytest.fixture(scope="session")
def small_scm():
    """Four training domains and one test domain, 30 objects per class."""
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=30, seed=3))
    names = ds.domain_names
    return split(ds, names[:-1], names[-1:], 0.2, 3)


@pytest.fixture(scope="session")
def run_preset(tmp_path_factory):
    """Run a bundled preset once per session; returns (summary, output dir)."""
    from cmdg import experiment

    cache = {}

    def run(name):
        if name not in cache:
            out = tmp_path_factory.mktemp(name)
            cache[name] = (experiment.run_config(experiment.load_config(name), out), out)
        return cache[name]

    return run


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Report one pass/fail line per acceptance criterion.

    Lines are printed immediately (outside capture) and repeated in the
    terminal summary.
    """

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
