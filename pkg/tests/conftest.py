from __future__ import annotations

import functools

import pytest

from loadpickup import EnumerativeBackend, Mode, RunConfig, run_multistep
from loadpickup.io import fixture_path, load_network
from loadpickup.network import Bus, Feeder, Network

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def fixture13(restoration: bool = False) -> Network:
    return load_network(fixture_path("fixture13_restoration.json" if restoration else "fixture13.json"))


def substation(bus_id: str = "s", cap: float = 5.0, **kw) -> Bus:
    return Bus(bus_id, is_root=True, gen_p_max=cap, gen_q_min=-cap, gen_q_max=cap, **kw)


def two_bus(load_p: float = 0.1, load_q: float = 0.05, r: float = 0.01, x: float = 0.01,
            i_max: float = 3.0) -> Network:
    return Network(
        buses=(substation("s"), Bus("a", load_p=load_p, load_q=load_q)),
        feeders=(Feeder("f", "s", "a", r, x, i_max),),
        name="two-bus",
    )


def triangle(r_expensive: float = 0.2) -> Network:
    return Network(
        buses=(substation("s"), Bus("a", load_p=0.3, load_q=0.1), Bus("b", load_p=0.2, load_q=0.08)),
        feeders=(
            Feeder("sa", "s", "a", 0.01, 0.01, 2.0),
            Feeder("ab", "a", "b", 0.02, 0.01, 2.0),
            Feeder("sb", "s", "b", r_expensive, 0.05, 2.0),
        ),
        name="triangle",
    )


@functools.lru_cache(maxsize=None)
def fixture_run(mode: Mode, segments: int = 10, max_iters: int = 5, mip_gap: float = 1e-4):
    net = fixture13(restoration=mode is Mode.RESTORATION)
    cfg = RunConfig(mode=mode, segments=segments, max_iters=max_iters, mip_gap=mip_gap)
    return run_multistep(net, cfg, EnumerativeBackend())


@pytest.fixture(scope="session")
def reconfiguration_report():
    return fixture_run(Mode.RECONFIGURATION)


@pytest.fixture(scope="session")
def restoration_report():
    return fixture_run(Mode.RESTORATION)
