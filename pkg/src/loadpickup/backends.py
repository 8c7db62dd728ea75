"""Solving contract for :class:`~loadpickup.model.MilpModel` instances.

Two backends share it:

* :class:`HighsBackend` hands the full MILP to the HiGHS branch-and-cut
  solver;
* :class:`EnumerativeBackend` enumerates every radial configuration and
  solves the linear program left once the binaries are fixed. It is exact
  and deterministic, and meant for desk-scale networks.

Both finish by re-solving the continuous part with the binaries fixed and a
second, lexicographic stage that keeps the objective and minimizes the
segment fills. That stage makes the reported fills the in-order ones, so
the solver's f-values coincide with the canonical PWL evaluation.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import networkx as nx
import numpy as np

from .model import MilpModel
from .network import Mode, Network, RunConfig
from .pwl import pwl_slopes, PwlSpec

try:
    import highspy
except ImportError:  # pragma: no cover - exercised only without highspy
    highspy = None

log = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 20
FEASIBILITY_TOL = 1e-9
INTEGRALITY_TOL = 1e-6
# relative tolerance under which two objectives count as equal
TIE_RTOL = 1e-9
MAX_TOPOLOGY_CUTS = 500


class BackendUnavailable(RuntimeError):
    pass


class EnumerationCapError(RuntimeError):
    pass


class BackendError(RuntimeError):
    pass


@dataclass
class Solution:
    status: str
    objective: float = math.nan
    v: dict[str, int] = field(default_factory=dict)
    w: dict[str, int] = field(default_factory=dict)
    p_flow: dict[str, float] = field(default_factory=dict)
    q_flow: dict[str, float] = field(default_factory=dict)
    i_sqr: dict[str, float] = field(default_factory=dict)
    v_sqr: dict[str, float] = field(default_factory=dict)
    p_gen: dict[str, float] = field(default_factory=dict)
    q_gen: dict[str, float] = field(default_factory=dict)
    p_load: dict[str, float] = field(default_factory=dict)
    q_load: dict[str, float] = field(default_factory=dict)
    achieved_gap: float = math.nan
    wall_time: float = 0.0
    # raw point in model column order; not serialized
    x: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def feasible(self) -> bool:
        return self.status in ("optimal", "gap-optimal")

    @property
    def energized_feeders(self) -> list[str]:
        return sorted(fid for fid, s in self.w.items() if s)

    @property
    def energized_buses(self) -> list[str]:
        return sorted(bid for bid, s in self.v.items() if s)

    def as_dict(self, timing: bool = True) -> dict:
        out = {
            "status": self.status,
            "objective": self.objective,
            "v": dict(sorted(self.v.items())),
            "w": dict(sorted(self.w.items())),
            "p_flow": dict(sorted(self.p_flow.items())),
            "q_flow": dict(sorted(self.q_flow.items())),
            "i_sqr": dict(sorted(self.i_sqr.items())),
            "v_sqr": dict(sorted(self.v_sqr.items())),
            "p_gen": dict(sorted(self.p_gen.items())),
            "q_gen": dict(sorted(self.q_gen.items())),
            "p_load": dict(sorted(self.p_load.items())),
            "q_load": dict(sorted(self.q_load.items())),
            "achieved_gap": self.achieved_gap,
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out

    @classmethod
    def from_vector(cls, model: MilpModel, x: np.ndarray, status: str,
                    achieved_gap: float = 0.0, wall_time: float = 0.0) -> "Solution":
        net = model.network
        ix = model.index
        x = np.asarray(x, dtype=float).copy()
        bins = model.binary_indices
        x[bins] = np.round(x[bins])
        sol = cls(status=status, achieved_gap=achieved_gap, wall_time=wall_time, x=x)
        for b in net.buses:
            on = int(x[ix[f"v_{b.id}"]])
            sol.v[b.id] = on
            sol.p_gen[b.id] = float(x[ix[f"PG_{b.id}"]])
            sol.q_gen[b.id] = float(x[ix[f"QG_{b.id}"]])
            sol.p_load[b.id] = float(x[ix[f"PL_{b.id}"]])
            sol.q_load[b.id] = float(x[ix[f"QL_{b.id}"]])
            if on:
                sol.v_sqr[b.id] = float(x[ix[f"V_{b.id}"]])
        for f in net.feeders:
            on = int(x[ix[f"w_{f.id}"]])
            sol.w[f.id] = on
            sol.p_flow[f.id] = float(x[ix[f"P_{f.id}"]]) if on else 0.0
            sol.q_flow[f.id] = float(x[ix[f"Q_{f.id}"]]) if on else 0.0
            sol.i_sqr[f.id] = float(x[ix[f"I_{f.id}"]]) if on else 0.0
        sol.objective = model.objective_value(x)
        return sol

    def achieved_f(self, model: MilpModel, feeder_id: str, quantity: str) -> float:
        """Value of the segment sum the solver actually produced."""
        ix = model.index
        ybar = (model.bounds.p_max if quantity == "P" else model.bounds.q_max)[feeder_id]
        slopes = pwl_slopes(PwlSpec(model.segments, ybar))
        fills = [self.x[ix[f"d{quantity}_{feeder_id}_{k}"]] for k in range(1, model.segments + 1)]
        return float(np.dot(slopes, fills))


def infeasible_solution(status: str = "infeasible", wall_time: float = 0.0) -> Solution:
    return Solution(status=status, wall_time=wall_time)


# ------------------------------------------------------------------ LP side

def _require_highs():
    if highspy is None:
        raise BackendUnavailable("highspy is not installed")


def _new_highs(model: MilpModel, integer: bool):
    _require_highs()
    h = highspy.Highs()
    h.silent()
    h.setOptionValue("primal_feasibility_tolerance", FEASIBILITY_TOL)
    h.setOptionValue("dual_feasibility_tolerance", FEASIBILITY_TOL)
    h.setOptionValue("threads", 1)
    c, a, lo, hi, lb, ub, isbin = model.arrays()
    n = len(c)
    inf = highspy.kHighsInf
    h.addCols(n, c, lb, ub, 0, np.zeros(n, dtype=np.int32),
              np.array([], dtype=np.int32), np.array([], dtype=float))
    if a.shape[0]:
        h.addRows(a.shape[0], np.where(np.isinf(lo), -inf, lo), np.where(np.isinf(hi), inf, hi),
                  a.nnz, a.indptr[:-1].astype(np.int32), a.indices.astype(np.int32),
                  a.data.astype(float))
    h.changeObjectiveSense(highspy.ObjSense.kMinimize if model.minimize
                           else highspy.ObjSense.kMaximize)
    if integer:
        idx = model.binary_indices
        h.changeColsIntegrality(len(idx), idx,
                                np.array([highspy.HighsVarType.kInteger] * len(idx)))
    return h


class LpWorkspace:
    """Reusable HiGHS LP holding a model with its binaries relaxed.

    ``solve`` fixes the binaries, optimizes the objective and, when
    ``polish`` is set, runs a second stage that holds the objective and
    minimizes the PWL segment sums plus the current squares.
    """

    def __init__(self, model: MilpModel):
        self.model = model
        self.h = _new_highs(model, integer=False)
        c, a, *_ = model.arrays()
        self.c = c
        self.n = len(c)
        self.bins = model.binary_indices
        inf = highspy.kHighsInf
        # objective-hold row, inactive until polishing
        nz = np.flatnonzero(c)
        self.hold_row = a.shape[0]
        self.h.addRows(1, np.array([-inf]), np.array([inf]), len(nz),
                       np.array([0], dtype=np.int32), nz.astype(np.int32), c[nz])
        self.polish_cost = np.zeros(self.n)
        ix = model.index
        for f in model.network.feeders:
            for y, ybar in (("P", model.bounds.p_max[f.id]), ("Q", model.bounds.q_max[f.id])):
                slopes = pwl_slopes(PwlSpec(model.segments, ybar))
                for k in range(1, model.segments + 1):
                    self.polish_cost[ix[f"d{y}_{f.id}_{k}"]] = slopes[k - 1]
            self.polish_cost[ix[f"I_{f.id}"]] = 1.0
        self.all_cols = np.arange(self.n, dtype=np.int32)

    def solve(self, fixed: np.ndarray, polish: bool = True) -> tuple[str, Optional[np.ndarray]]:
        h = self.h
        fixed = np.asarray(fixed, dtype=float)
        h.changeColsBounds(len(self.bins), self.bins, fixed, fixed)
        h.run()
        if h.getModelStatus() != highspy.HighsModelStatus.kOptimal:
            return "infeasible", None
        x = np.array(h.getSolution().col_value)
        if not polish:
            return "optimal", x
        obj = float(self.c @ x)
        tol = 1e-10 + 1e-9 * abs(obj)
        inf = highspy.kHighsInf
        if self.model.minimize:
            h.changeRowBounds(self.hold_row, -inf, obj + tol)
        else:
            h.changeRowBounds(self.hold_row, obj - tol, inf)
        h.changeColsCost(self.n, self.all_cols, self.polish_cost)
        h.changeObjectiveSense(highspy.ObjSense.kMinimize)
        h.run()
        ok = h.getModelStatus() == highspy.HighsModelStatus.kOptimal
        if ok:
            x = np.array(h.getSolution().col_value)
        h.changeRowBounds(self.hold_row, -inf, inf)
        h.changeColsCost(self.n, self.all_cols, self.c)
        h.changeObjectiveSense(highspy.ObjSense.kMinimize if self.model.minimize
                               else highspy.ObjSense.kMaximize)
        return "optimal", x


def _assignment_vector(model: MilpModel, fixed) -> np.ndarray:
    if isinstance(fixed, Configuration):
        fixed = fixed.as_names()
    if isinstance(fixed, dict):
        vec = np.empty(len(model.binary_indices))
        for k, col in enumerate(model.binary_indices):
            name = model.variables[col].name
            if name not in fixed:
                raise ValueError(f"assignment misses binary {name}")
            vec[k] = float(fixed[name])
        return vec
    vec = np.asarray(fixed, dtype=float)
    if vec.shape != (len(model.binary_indices),):
        raise ValueError("assignment must cover every binary")
    return vec


def solve_continuous_subproblem(model: MilpModel, fixed_binaries) -> Solution:
    """Fix the binaries and solve the remaining linear program.

    ``fixed_binaries`` may be a :class:`Configuration`, a mapping from
    binary variable name to 0/1, or a vector in ``model.binary_indices``
    order.
    """
    t0 = time.perf_counter()
    vec = _assignment_vector(model, fixed_binaries)
    status, x = LpWorkspace(model).solve(vec)
    if x is None:
        return infeasible_solution(wall_time=time.perf_counter() - t0)
    return Solution.from_vector(model, x, "optimal", 0.0, time.perf_counter() - t0)


# ------------------------------------------------------------------ enumeration

@dataclass(frozen=True)
class Configuration:
    v: dict[str, int]
    w: dict[str, int]

    @property
    def key(self) -> tuple[str, ...]:
        return tuple(sorted(fid for fid, s in self.w.items() if s))

    def as_names(self) -> dict[str, int]:
        out = {f"v_{b}": s for b, s in self.v.items()}
        out.update({f"w_{f}": s for f, s in self.w.items()})
        return out


class _RollbackUnionFind:
    def __init__(self, items, roots):
        self.parent = {i: i for i in items}
        self.size = {i: 1 for i in items}
        self.roots = {i: int(i in roots) for i in items}
        self.history: list = []

    def find(self, a):
        while self.parent[a] != a:
            a = self.parent[a]
        return a

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.history.append((ra, rb))
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.roots[ra] += self.roots[rb]

    def undo(self) -> None:
        ra, rb = self.history.pop()
        self.parent[rb] = rb
        self.size[ra] -= self.size[rb]
        self.roots[ra] -= self.roots[rb]


def bus_states(net: Network, cfg: RunConfig) -> dict[str, Optional[int]]:
    if cfg.mode is Mode.RECONFIGURATION:
        return {b.id: 1 for b in net.buses}
    return {b.id: b.fixed_state for b in net.buses}


def feeder_states(net: Network) -> dict[str, Optional[int]]:
    out = {}
    for f in net.feeders:
        if f.fixed_state is not None:
            out[f.id] = f.fixed_state
        elif not f.switchable:
            out[f.id] = 1
        else:
            out[f.id] = None
    return out


def enumerate_radial_configurations(net: Network, cfg: RunConfig,
                                    cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[Configuration]:
    """Yield every radial (v, w) assignment admitted by the model.

    Energized feeders form a forest; every tree holds a root-capable bus
    (exactly one under the derived island-count policy); bus states follow
    the feeder states and the fixings; the island count matches the
    policy. Order is deterministic.
    """
    policy = cfg.island_policy
    derived = policy == "derived"
    vstate = bus_states(net, cfg)
    wstate = feeder_states(net)
    roots = set(net.roots)

    forced, free = [], []
    for f in net.feeders:
        dead_end = vstate[f.from_bus] == 0 or vstate[f.to_bus] == 0
        if wstate[f.id] == 1:
            if dead_end:
                return
            forced.append(f)
        elif wstate[f.id] is None and not dead_end:
            free.append(f)
    free.sort(key=lambda f: f.id)
    if len(free) > cap:
        raise EnumerationCapError(
            f"{len(free)} switchable feeders exceed the enumeration cap of {cap}; "
            "use the external MILP backend")

    bus_ids = [b.id for b in net.buses]
    uf = _RollbackUnionFind(bus_ids, roots)
    for f in forced:
        ra, rb = uf.find(f.from_bus), uf.find(f.to_bus)
        if ra == rb or (derived and uf.roots[ra] and uf.roots[rb]):
            return
        uf.union(ra, rb)

    all_on = all(s == 1 for s in vstate.values())
    need = len(bus_ids) - policy if (all_on and not derived) else None
    wfixed = {f.id: (1 if wstate[f.id] == 1 else 0) for f in net.feeders}

    def finalize(chosen: list[str]) -> Iterator[Configuration]:
        comps: dict[str, list[str]] = {}
        for b in bus_ids:
            comps.setdefault(uf.find(b), []).append(b)
        v = {b: 0 for b in bus_ids}
        n_trees = 0
        optional_roots = []
        for rep, members in comps.items():
            if len(members) > 1:
                if uf.roots[rep] == 0:
                    return
                n_trees += 1
                for b in members:
                    v[b] = 1
                continue
            (b,) = members
            state = vstate[b]
            if state == 1:
                if b not in roots:
                    return
                v[b] = 1
                n_trees += 1
            elif state is None and b in roots:
                optional_roots.append(b)
        w = dict(wfixed)
        for fid in chosen:
            w[fid] = 1
        optional_roots.sort()
        for picks in itertools.product((0, 1), repeat=len(optional_roots)):
            trees = n_trees + sum(picks)
            if not derived and trees != policy:
                continue
            vv = dict(v)
            for b, s in zip(optional_roots, picks):
                vv[b] = s
            yield Configuration(vv, dict(w))

    def recurse(i: int, chosen: list[str]) -> Iterator[Configuration]:
        if need is not None:
            n_edges = len(forced) + len(chosen)
            if n_edges > need or n_edges + (len(free) - i) < need:
                return
        if i == len(free):
            yield from finalize(chosen)
            return
        f = free[i]
        ra, rb = uf.find(f.from_bus), uf.find(f.to_bus)
        if ra != rb and not (derived and uf.roots[ra] and uf.roots[rb]):
            uf.union(ra, rb)
            chosen.append(f.id)
            yield from recurse(i + 1, chosen)
            chosen.pop()
            uf.undo()
        yield from recurse(i + 1, chosen)

    yield from recurse(0, [])


def _served_load(net: Network, cfg: Configuration) -> float:
    return math.fsum(net.bus(b).load_p for b, s in sorted(cfg.v.items()) if s)


def _ties(a: float, b: float) -> bool:
    return abs(a - b) <= TIE_RTOL * max(1.0, abs(a), abs(b))


class EnumerativeBackend:
    """Exact backend: radial-configuration enumeration times LP solves."""

    name = "enumerate"

    def __init__(self, cap: int = DEFAULT_ENUMERATION_CAP):
        self.cap = cap
        self.last_count = 0

    def solve(self, model: MilpModel, gap: float = 0.0,
              warm: Optional[Solution] = None, time_limit: Optional[float] = None) -> Solution:
        # ``warm`` cannot change an exhaustive search; accepted for interface parity
        t0 = time.perf_counter()
        net = model.network
        configs = list(enumerate_radial_configurations(net, model.config, self.cap))
        self.last_count = len(configs)
        ws = LpWorkspace(model)
        best: Optional[tuple[float, tuple, Configuration]] = None

        if not model.minimize and set(model.objective) == {model.index[f"PL_{b.id}"] for b in net.buses}:
            # served load is fixed by v; the first feasible configuration in
            # (load desc, key asc) order is optimal
            ranked = sorted(configs, key=lambda c: (-round(_served_load(net, c), 12), c.key))
            for cfg in ranked:
                status, x = ws.solve(_assignment_vector(model, cfg), polish=False)
                if x is not None:
                    best = (model.objective_value(x), cfg.key, cfg)
                    break
        else:
            sign = 1.0 if model.minimize else -1.0
            for cfg in configs:
                status, x = ws.solve(_assignment_vector(model, cfg), polish=False)
                if x is None:
                    continue
                obj = model.objective_value(x)
                if best is None:
                    best = (obj, cfg.key, cfg)
                elif _ties(obj, best[0]):
                    if cfg.key < best[1]:
                        best = (obj, cfg.key, cfg)
                elif sign * obj < sign * best[0]:
                    best = (obj, cfg.key, cfg)

        if best is None:
            return infeasible_solution(wall_time=time.perf_counter() - t0)
        final = LpWorkspace(model).solve(_assignment_vector(model, best[2]))[1]
        return Solution.from_vector(model, final, "optimal", 0.0, time.perf_counter() - t0)


class HighsBackend:
    """Adapter for the HiGHS MILP solver (in-memory model hand-off)."""

    name = "external"

    def __init__(self, time_limit: Optional[float] = None):
        _require_highs()
        self.time_limit = time_limit

    def solve(self, model: MilpModel, gap: float = 0.0,
              warm: Optional[Solution] = None, time_limit: Optional[float] = None) -> Solution:
        t0 = time.perf_counter()
        h = _new_highs(model, integer=True)
        h.setOptionValue("mip_rel_gap", float(gap))
        h.setOptionValue("mip_feasibility_tolerance", FEASIBILITY_TOL)
        limit = time_limit if time_limit is not None else self.time_limit
        if limit is not None:
            h.setOptionValue("time_limit", float(limit))
        if warm is not None and warm.feasible:
            names = Configuration(warm.v, warm.w).as_names()
            idx = model.binary_indices
            try:
                vals = np.array([float(names[model.variables[k].name]) for k in idx])
            except KeyError:
                vals = None
            if vals is not None:
                h.setSolution(len(idx), idx, vals)
        for _ in range(MAX_TOPOLOGY_CUTS + 1):
            h.run()
            status = h.getModelStatus()
            info = h.getInfo()
            ms = highspy.HighsModelStatus
            has_point = info.primal_solution_status == highspy.SolutionStatus.kSolutionStatusFeasible
            if status == ms.kInfeasible:
                return infeasible_solution(wall_time=time.perf_counter() - t0)
            if status == ms.kOptimal:
                label = "optimal" if info.mip_gap <= 1e-12 else "gap-optimal"
            elif status in (ms.kTimeLimit, ms.kInterrupt, ms.kIterationLimit, ms.kSolutionLimit):
                label = "aborted"
                if not has_point:
                    return infeasible_solution("aborted", time.perf_counter() - t0)
            else:
                raise BackendError(f"HiGHS returned {h.modelStatusToString(status)}")
            x = np.array(h.getSolution().col_value)
            vec = np.round(x[model.binary_indices])
            cut = topology_cut(model, vec)
            if cut is None or label == "aborted":
                break
            cols, coeffs, hi = cut
            h.addRow(-highspy.kHighsInf, hi, len(cols), np.array(cols, dtype=np.int32),
                     np.array(coeffs, dtype=float))
        else:
            raise BackendError(f"no radial topology after {MAX_TOPOLOGY_CUTS} cuts")
        _, polished = LpWorkspace(model).solve(vec)
        if polished is not None:
            x = polished
        return Solution.from_vector(model, x, label, float(info.mip_gap), time.perf_counter() - t0)


def topology_cut(model: MilpModel, bins: np.ndarray) -> Optional[tuple[list[int], list[float], float]]:
    """A row ``coeffs . x <= hi`` cutting off a non-radial binary point.

    The counting row alone admits a loop in one island balanced by a
    separate island elsewhere. A loop is removed by forbidding all of its
    feeders at once; any other defect (an island without a root) by a
    no-good cut on the whole binary vector. Returns None for a rooted forest.
    """
    net = model.network
    ix = model.index
    on = {model.variables[k].name: int(b) for k, b in zip(model.binary_indices, bins)}
    g = nx.MultiGraph()
    g.add_nodes_from(b.id for b in net.buses if on[f"v_{b.id}"])
    for f in net.feeders:
        if on[f"w_{f.id}"]:
            g.add_edge(f.from_bus, f.to_bus, key=f.id)
    for comp in sorted(nx.connected_components(g), key=min):
        sub = g.subgraph(comp)
        if sub.number_of_edges() >= sub.number_of_nodes():
            loop = nx.find_cycle(sub)
            cols = sorted(ix[f"w_{key}"] for _, _, key in loop)
            return cols, [1.0] * len(cols), float(len(cols) - 1)
    roots = set(net.roots)
    if all(roots & comp for comp in nx.connected_components(g)):
        return None
    cols, coeffs, ones = [], [], 0
    for k, b in zip(model.binary_indices, bins):
        cols.append(int(k))
        coeffs.append(1.0 if b else -1.0)
        ones += int(b)
    return cols, coeffs, float(ones - 1)


def make_backend(name: str, **kwargs) -> Union[EnumerativeBackend, HighsBackend]:
    if name in ("enumerate", "enumerative"):
        return EnumerativeBackend(**kwargs)
    if name in ("external", "highs"):
        return HighsBackend(**kwargs)
    raise ValueError(f"unknown backend {name!r}")
