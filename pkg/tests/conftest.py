import numpy as np
import pytest

from replaystore.chunks import Codec, build_chunk
from replaystore.tensors import signature_of
from replaystore.server import Server, ServerConfig
from replaystore.table import TableConfig


@pytest.fixture
def make_server():
    servers = []

    def factory(*tables, **kw):
        tables = [t if isinstance(t, TableConfig) else TableConfig(t) for t in tables]
        server = Server(ServerConfig(tables=tables, **kw)).start()
        servers.append(server)
        return server

    yield factory
    for s in servers:
        s.stop()


_keys = iter(range(1, 1 << 62))


def chunk_of(rows=1, key=None, width=2, codec=Codec.NONE):
    """A small float32 chunk whose rows hold their own row index."""
    steps = [np.full(width, i, np.float32) for i in range(rows)]
    return build_chunk(next(_keys) if key is None else key, steps, signature_of(steps[0]), codec)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def _report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
