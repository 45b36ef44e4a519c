import pytest

from diffrenv import cli

_LINES = []


class Recorder:
    def __init__(self, number, title):
        self.number, self.title = number, title

    def __call__(self, ok, detail):
        line = f"criterion {self.number:>2} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}"
        _LINES.append(line)
        print(line)
        assert ok, line


@pytest.fixture
def criterion():
    return Recorder


class Shipped:
    """Runs each shipped config at most once per session."""

    def __init__(self, root):
        self.root = root
        self.done = {}

    def __call__(self, name, **kw):
        key = (name, tuple(sorted(kw.items())))
        if key not in self.done:
            from pathlib import Path

            out = self.root / f"{name}_{len(self.done)}"
            cfg = Path(__file__).resolve().parent.parent / "configs" / f"{name}.cfg"
            self.done[key] = (cli.run(cfg, out, **kw), out)
        return self.done[key]


@pytest.fixture(scope="session")
def shipped(tmp_path_factory):
    return Shipped(tmp_path_factory.mktemp("shipped"))


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
