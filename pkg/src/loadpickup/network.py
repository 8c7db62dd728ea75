"""Network and run-configuration types, validation and per-unit conversion."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Optional, Union

import networkx as nx


class Mode(str, enum.Enum):
    RECONFIGURATION = "reconfiguration"
    RESTORATION = "restoration"


@dataclass(frozen=True)
class Bus:
    id: str
    is_root: bool = False
    load_p: float = 0.0
    load_q: float = 0.0
    gen_p_min: float = 0.0
    gen_p_max: float = 0.0
    gen_q_min: float = 0.0
    gen_q_max: float = 0.0
    # None = free, 0 = forced de-energized, 1 = forced energized
    fixed_state: Optional[int] = None

    @property
    def has_generation(self) -> bool:
        return self.gen_p_max > 0 or self.gen_q_min != 0 or self.gen_q_max != 0


@dataclass(frozen=True)
class Feeder:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    i_max: float
    switchable: bool = True
    fixed_state: Optional[int] = None

    @property
    def z(self) -> float:
        return math.hypot(self.r, self.x)

    @property
    def z_sqr(self) -> float:
        return self.r * self.r + self.x * self.x


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    feeders: tuple[Feeder, ...]
    v_norm: float = 1.0
    v_min: float = 0.95
    v_max: float = 1.05
    base_mva: float = 1.0
    base_kv: float = 1.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "feeders", tuple(self.feeders))

    @cached_property
    def bus_map(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def feeder_map(self) -> dict[str, Feeder]:
        return {f.id: f for f in self.feeders}

    def bus(self, bus_id: str) -> Bus:
        return self.bus_map[bus_id]

    def feeder(self, feeder_id: str) -> Feeder:
        return self.feeder_map[feeder_id]

    @property
    def roots(self) -> list[str]:
        return [b.id for b in self.buses if b.is_root]

    def graph(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        g.add_nodes_from(b.id for b in self.buses)
        for f in self.feeders:
            g.add_edge(f.from_bus, f.to_bus, key=f.id)
        return g


@dataclass(frozen=True)
class RunConfig:
    """Settings of one load pick-up run.

    ``big_m=None`` selects per-row tight constants; a float applies that
    constant everywhere. ``n_s=None`` resolves by mode: one island in
    reconfiguration, one island per energized root bus in restoration.
    ``n_s="derived"`` forces the latter in any mode.
    """

    mode: Mode = Mode.RECONFIGURATION
    segments: int = 10
    eps_p: float = 0.1
    eps_q: float = 0.1
    max_iters: int = 5
    mip_gap: float = 1e-4
    big_m: Optional[float] = None
    n_s: Union[int, str, None] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if int(self.segments) != self.segments or self.segments < 1:
            raise ValueError(f"segment count must be a positive integer, got {self.segments}")
        if self.eps_p <= 0 or self.eps_q <= 0:
            raise ValueError("error thresholds must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.mip_gap < 0:
            raise ValueError("mip_gap must be >= 0")
        if self.big_m is not None and self.big_m <= 0:
            raise ValueError("fixed big-M must be positive")
        if self.n_s is not None and self.n_s != "derived":
            if int(self.n_s) != self.n_s or self.n_s < 0:
                raise ValueError(f"invalid island count {self.n_s!r}")

    @property
    def island_policy(self) -> Union[int, str]:
        """Resolved island-count policy: an int, or ``"derived"``."""
        if self.n_s is not None:
            return self.n_s
        return 1 if self.mode is Mode.RECONFIGURATION else "derived"

    def as_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "segments": self.segments,
            "eps_p": self.eps_p,
            "eps_q": self.eps_q,
            "max_iters": self.max_iters,
            "mip_gap": self.mip_gap,
            "big_m": "tight" if self.big_m is None else self.big_m,
            "n_s": self.island_policy,
        }


@dataclass(frozen=True)
class Violation:
    code: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.element}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __len__(self) -> int:
        return len(self.violations)


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def validate_network(net: Network) -> ValidationReport:
    """Check every structural and physical invariant of ``net``.

    Returns an empty report when the network is usable; otherwise one
    violation per problem, each naming the offending bus or feeder.
    """
    out: list[Violation] = []

    def bad(code: str, element: str, message: str) -> None:
        out.append(Violation(code, element, message))

    if not (_finite(net.v_min, net.v_norm, net.v_max) and 0 < net.v_min <= net.v_norm <= net.v_max):
        bad("voltage-box", net.name or "network",
            f"need 0 < v_min <= v_norm <= v_max, got {net.v_min}, {net.v_norm}, {net.v_max}")

    seen: set[str] = set()
    for b in net.buses:
        if b.id in seen:
            bad("duplicate-bus", b.id, "bus id used more than once")
        seen.add(b.id)
        if not _finite(b.load_p, b.load_q, b.gen_p_min, b.gen_p_max, b.gen_q_min, b.gen_q_max):
            bad("non-finite", b.id, "bus parameters must be finite")
            continue
        if b.load_p < 0:
            bad("negative-load", b.id, f"load_p = {b.load_p} < 0")
        if b.gen_p_min > b.gen_p_max:
            bad("gen-p-bounds", b.id, f"gen_p_min {b.gen_p_min} > gen_p_max {b.gen_p_max}")
        if b.gen_q_min > b.gen_q_max:
            bad("gen-q-bounds", b.id, f"gen_q_min {b.gen_q_min} > gen_q_max {b.gen_q_max}")
        if b.is_root and not b.has_generation:
            bad("root-without-source", b.id, "root-capable bus has no generation capability")
        if b.fixed_state not in (None, 0, 1):
            bad("bad-state", b.id, f"fixed_state must be None, 0 or 1, got {b.fixed_state!r}")

    seen_f: set[str] = set()
    pairs: dict[frozenset, str] = {}
    for f in net.feeders:
        if f.id in seen_f:
            bad("duplicate-feeder", f.id, "feeder id used more than once")
        seen_f.add(f.id)
        if f.from_bus == f.to_bus:
            bad("self-loop", f.id, f"feeder connects bus {f.from_bus} to itself")
        for end in (f.from_bus, f.to_bus):
            if end not in net.bus_map:
                bad("unknown-bus", f.id, f"endpoint {end!r} is not a bus")
        pair = frozenset((f.from_bus, f.to_bus))
        if pair in pairs and f.from_bus != f.to_bus:
            bad("parallel-feeder", f.id, f"duplicates bus pair of feeder {pairs[pair]}")
        pairs.setdefault(pair, f.id)
        if not _finite(f.r, f.x, f.i_max):
            bad("non-finite", f.id, "feeder parameters must be finite")
            continue
        if f.r < 0:
            bad("negative-resistance", f.id, f"r = {f.r} < 0")
        if f.r + abs(f.x) <= 0:
            bad("zero-impedance", f.id, "impedance magnitude is zero")
        if f.i_max <= 0:
            bad("current-limit", f.id, f"i_max = {f.i_max} must be positive")
        if f.fixed_state not in (None, 0, 1):
            bad("bad-state", f.id, f"fixed_state must be None, 0 or 1, got {f.fixed_state!r}")

    roots = set(net.roots)
    if not roots:
        bad("no-root", net.name or "network", "no root-capable bus")

    if not any(v.code in ("unknown-bus", "duplicate-bus") for v in out):
        g = nx.Graph()
        g.add_nodes_from(b.id for b in net.buses)
        g.add_edges_from((f.from_bus, f.to_bus) for f in net.feeders)
        for comp in sorted(nx.connected_components(g), key=lambda c: sorted(c)):
            if not comp & roots:
                bad("unreachable", sorted(comp)[0],
                    f"component {sorted(comp)} contains no root-capable bus")
    return ValidationReport(out)


# ---------------------------------------------------------------- per unit

def current_base(base_mva: float, base_kv: float) -> float:
    """Three-phase current base in amperes."""
    return base_mva * 1e6 / (math.sqrt(3.0) * base_kv * 1e3)


def impedance_base(base_mva: float, base_kv: float) -> float:
    return base_kv ** 2 / base_mva


_STATE_IN = {"free": None, "on": 1, "off": 0, None: None}
_STATE_OUT = {None: "free", 1: "on", 0: "off"}


def parse_state(raw: Any) -> Optional[int]:
    if raw in _STATE_IN:
        return _STATE_IN[raw]
    if raw in (0, 1):
        return int(raw)
    raise ValueError(f"unknown state {raw!r}")


def per_unit_ingest(raw: dict[str, Any]) -> Network:
    """Build a per-unit :class:`Network` from an engineering-unit description.

    Powers are in MW/Mvar, impedances in ohm (or pu when
    ``units.impedance == "pu"``), current limits in A (or pu when
    ``units.current == "pu"``). Voltages are always per-unit.
    """
    base_mva = float(raw["base_mva"])
    base_kv = float(raw["base_kv"])
    if not (base_mva > 0 and base_kv > 0):
        raise ValueError(f"base values must be positive, got {base_mva} MVA / {base_kv} kV")
    units = raw.get("units", {})
    z_base = 1.0 if units.get("impedance", "ohm") == "pu" else impedance_base(base_mva, base_kv)
    i_base = 1.0 if units.get("current", "A") == "pu" else current_base(base_mva, base_kv)

    buses = []
    for b in raw["buses"]:
        buses.append(Bus(
            id=str(b["id"]),
            is_root=bool(b.get("root", False)),
            load_p=b.get("load_mw", 0.0) / base_mva,
            load_q=b.get("load_mvar", 0.0) / base_mva,
            gen_p_min=b.get("gen_p_min_mw", 0.0) / base_mva,
            gen_p_max=b.get("gen_p_max_mw", 0.0) / base_mva,
            gen_q_min=b.get("gen_q_min_mvar", 0.0) / base_mva,
            gen_q_max=b.get("gen_q_max_mvar", 0.0) / base_mva,
            fixed_state=parse_state(b.get("state", "free")),
        ))
    feeders = []
    for f in raw["feeders"]:
        feeders.append(Feeder(
            id=str(f["id"]),
            from_bus=str(f["from"]),
            to_bus=str(f["to"]),
            r=f["r"] / z_base,
            x=f["x"] / z_base,
            i_max=f["i_max"] / i_base,
            switchable=bool(f.get("switchable", True)),
            fixed_state=parse_state(f.get("state", "free")),
        ))
    return Network(
        buses=tuple(buses),
        feeders=tuple(feeders),
        v_norm=float(raw.get("v_norm", 1.0)),
        v_min=float(raw.get("v_min", 0.95)),
        v_max=float(raw.get("v_max", 1.05)),
        base_mva=base_mva,
        base_kv=base_kv,
        name=str(raw.get("name", "")),
    )


def to_engineering(net: Network, impedance: str = "ohm", current: str = "A") -> dict[str, Any]:
    """Inverse of :func:`per_unit_ingest`."""
    z_base = 1.0 if impedance == "pu" else impedance_base(net.base_mva, net.base_kv)
    i_base = 1.0 if current == "pu" else current_base(net.base_mva, net.base_kv)
    s = net.base_mva
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "base_kv": net.base_kv,
        "v_norm": net.v_norm,
        "v_min": net.v_min,
        "v_max": net.v_max,
        "units": {"impedance": impedance, "current": current},
        "buses": [
            {
                "id": b.id,
                "root": b.is_root,
                "load_mw": b.load_p * s,
                "load_mvar": b.load_q * s,
                "gen_p_min_mw": b.gen_p_min * s,
                "gen_p_max_mw": b.gen_p_max * s,
                "gen_q_min_mvar": b.gen_q_min * s,
                "gen_q_max_mvar": b.gen_q_max * s,
                "state": _STATE_OUT[b.fixed_state],
            }
            for b in net.buses
        ],
        "feeders": [
            {
                "id": f.id,
                "from": f.from_bus,
                "to": f.to_bus,
                "r": f.r * z_base,
                "x": f.x * z_base,
                "i_max": f.i_max * i_base,
                "switchable": f.switchable,
                "state": _STATE_OUT[f.fixed_state],
            }
            for f in net.feeders
        ],
    }
