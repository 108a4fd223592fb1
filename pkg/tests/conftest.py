import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tilesparse.attention import HeadTensors
from tilesparse.rng import make_rng

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_head(n, d, seed, scale=1.0):
    rng = make_rng(seed, 0xC0FFEE)
    return HeadTensors(*(rng.normal(size=(n, d)) * scale for _ in range(3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str = ""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
