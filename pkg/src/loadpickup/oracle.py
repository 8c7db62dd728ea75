"""Exact ground truth for radial topologies.

``distflow_solve`` runs a backward/forward sweep of the full (non-linear)
DistFlow equations on each energized tree. ``check_forest`` verifies the
topology, and ``brute_force_optimum`` scores every radial configuration
with the exact flow.

Flow variables follow the model's convention: for feeder i->j, ``P_ij``
is the power that arrives at j (negative when power travels j->i, in which
case it equals minus the power leaving j). With this convention
``V_j * I_ij = P_ij**2 + Q_ij**2`` holds in both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import networkx as nx

from .backends import (
    DEFAULT_ENUMERATION_CAP,
    Solution,
    TIE_RTOL,
    enumerate_radial_configurations,
)
from .network import Mode, Network, RunConfig
from .pwl import PwlSpec, pwl_max_gap

MAX_SWEEPS = 500
SWEEP_TOL = 1e-12


class OracleError(RuntimeError):
    pass


class NotRadialError(OracleError):
    pass


class SweepDivergence(OracleError):
    pass


@dataclass
class ExactFlowState:
    p_flow: dict[str, float]
    q_flow: dict[str, float]
    i_sqr: dict[str, float]
    v_sqr: dict[str, float]
    slack: dict[str, tuple[float, float]]
    residuals: dict[str, float]
    sweeps: int

    @property
    def losses(self) -> float:
        return self._losses

    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)


def pick_slack(net: Network, members) -> str:
    """Root bus acting as voltage reference of a tree: largest P capacity, then file order."""
    order = {b.id: k for k, b in enumerate(net.buses)}
    candidates = [b for b in members if net.bus(b).is_root]
    if not candidates:
        raise NotRadialError(f"tree {sorted(members)} contains no root-capable bus")
    return min(candidates, key=lambda b: (-net.bus(b).gen_p_max, order[b]))


def energized_graph(net: Network, v: Mapping[str, int], w: Mapping[str, int]) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(b for b, s in v.items() if s)
    for f in net.feeders:
        if w.get(f.id, 0):
            g.add_edge(f.from_bus, f.to_bus, fid=f.id)
    return g


def distflow_solve(
    net: Network,
    v: Mapping[str, int],
    w: Mapping[str, int],
    loads: Mapping[str, tuple[float, float]],
    gens: Optional[Mapping[str, tuple[float, float]]] = None,
    root_v_sqr: Optional[float] = None,
) -> ExactFlowState:
    """Exact DistFlow state of the energized forest given by ``(v, w)``.

    ``loads`` maps energized buses to served (P, Q); ``gens`` fixes the
    output of energized non-slack buses. Each tree's slack bus
    (see :func:`pick_slack`) closes the balance at voltage ``root_v_sqr``
    (default ``v_norm**2``).
    """
    gens = dict(gens or {})
    g = energized_graph(net, v, w)
    if g.number_of_nodes() and not nx.is_forest(g):
        raise NotRadialError("energized feeders contain a loop")
    v0 = net.v_norm ** 2 if root_v_sqr is None else root_v_sqr

    # orient every tree away from its slack
    parent_edge: dict[str, tuple[str, object]] = {}
    order: list[str] = []
    slacks: dict[str, str] = {}
    for comp in sorted(nx.connected_components(g), key=lambda c: sorted(c)):
        s = pick_slack(net, comp)
        slacks[s] = s
        for u, c in nx.bfs_edges(g, s, sort_neighbors=sorted):
            parent_edge[c] = (u, net.feeder(g.edges[u, c]["fid"]))
        order.extend([s] + [c for _, c in nx.bfs_edges(g, s, sort_neighbors=sorted)])
    children: dict[str, list[str]] = {b: [] for b in g.nodes}
    for c, (u, _) in parent_edge.items():
        children[u].append(c)

    def net_demand(b: str) -> tuple[float, float]:
        pl, ql = loads.get(b, (0.0, 0.0))
        pg, qg = (0.0, 0.0) if b in slacks else gens.get(b, (0.0, 0.0))
        return pl - pg, ql - qg

    vsq = {b: v0 for b in g.nodes}
    ell = {c: 0.0 for c in parent_edge}
    recv: dict[str, tuple[float, float]] = {}
    send: dict[str, tuple[float, float]] = {}
    sweeps = 0
    for sweeps in range(1, MAX_SWEEPS + 1):
        # backward: power arriving at each child, then leaving its parent
        for b in reversed(order):
            if b not in parent_edge:
                continue
            dp, dq = net_demand(b)
            for c in children[b]:
                dp += send[c][0]
                dq += send[c][1]
            f = parent_edge[b][1]
            recv[b] = (dp, dq)
            send[b] = (dp + f.r * ell[b], dq + f.x * ell[b])
        # forward: voltages, then current squares
        change = 0.0
        for b in order:
            if b not in parent_edge:
                continue
            u, f = parent_edge[b]
            ps, qs = send[b]
            new_v = vsq[u] - 2.0 * (f.r * ps + f.x * qs) + f.z_sqr * ell[b]
            if not (new_v > 0.0) or not math.isfinite(new_v):
                raise SweepDivergence(f"voltage collapse at bus {b} after {sweeps} sweeps")
            change = max(change, abs(new_v - vsq[b]))
            vsq[b] = new_v
        for b in parent_edge:
            pr, qr = recv[b]
            new_l = (pr * pr + qr * qr) / vsq[b]
            if not math.isfinite(new_l) or new_l > 1e12:
                raise SweepDivergence(f"current blow-up on feeder {parent_edge[b][1].id}")
            change = max(change, abs(new_l - ell[b]))
            ell[b] = new_l
        if change < SWEEP_TOL:
            break
    else:
        raise SweepDivergence(f"no convergence within {MAX_SWEEPS} sweeps")

    # one more backward pass so flows match the converged currents
    for b in reversed(order):
        if b not in parent_edge:
            continue
        dp, dq = net_demand(b)
        for c in children[b]:
            dp += send[c][0]
            dq += send[c][1]
        f = parent_edge[b][1]
        recv[b] = (dp, dq)
        send[b] = (dp + f.r * ell[b], dq + f.x * ell[b])

    p_flow, q_flow, i_sqr = {}, {}, {}
    for c, (u, f) in parent_edge.items():
        if f.to_bus == c:
            p_flow[f.id], q_flow[f.id] = recv[c]
        else:
            p_flow[f.id], q_flow[f.id] = -send[c][0], -send[c][1]
        i_sqr[f.id] = ell[c]

    slack_out: dict[str, tuple[float, float]] = {}
    for s in slacks:
        pl, ql = loads.get(s, (0.0, 0.0))
        slack_out[s] = (pl + sum(send[c][0] for c in children[s]),
                        ql + sum(send[c][1] for c in children[s]))

    state = ExactFlowState(p_flow, q_flow, i_sqr, dict(vsq), slack_out, {}, sweeps)
    state._losses = math.fsum(net.feeder(fid).r * i for fid, i in sorted(i_sqr.items()))
    state.residuals = distflow_residuals(net, state, loads, {**gens, **slack_out})
    return state


def distflow_residuals(net: Network, state: ExactFlowState,
                       loads: Mapping[str, tuple[float, float]],
                       gens: Mapping[str, tuple[float, float]]) -> dict[str, float]:
    """Worst absolute residual of the balance, drop and current equations."""
    bal_p = {b: gens.get(b, (0.0, 0.0))[0] - loads.get(b, (0.0, 0.0))[0] for b in state.v_sqr}
    bal_q = {b: gens.get(b, (0.0, 0.0))[1] - loads.get(b, (0.0, 0.0))[1] for b in state.v_sqr}
    drop = current = 0.0
    for fid in state.p_flow:
        f = net.feeder(fid)
        p, q, ell = state.p_flow[fid], state.q_flow[fid], state.i_sqr[fid]
        bal_p[f.to_bus] += p
        bal_q[f.to_bus] += q
        bal_p[f.from_bus] -= p + f.r * ell
        bal_q[f.from_bus] -= q + f.x * ell
        vi, vj = state.v_sqr[f.from_bus], state.v_sqr[f.to_bus]
        drop = max(drop, abs(vi - vj - 2.0 * (f.r * p + f.x * q) - f.z_sqr * ell))
        current = max(current, abs(vj * ell - (p * p + q * q)))
    return {
        "eq3": max((abs(x) for x in bal_p.values()), default=0.0),
        "eq4": max((abs(x) for x in bal_q.values()), default=0.0),
        "eq5": drop,
        "eq6": current,
    }


# ------------------------------------------------------------------ topology

@dataclass
class ForestReport:
    is_forest: bool
    trees: list[list[str]]
    rootless_trees: list[list[str]]
    endpoint_violations: list[str]
    n_feeders: int
    n_buses: int
    n_trees: int

    @property
    def counting_identity(self) -> bool:
        return self.n_feeders == self.n_buses - self.n_trees

    @property
    def ok(self) -> bool:
        return (self.is_forest and not self.rootless_trees
                and not self.endpoint_violations and self.counting_identity)

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "is_forest": self.is_forest,
            "n_trees": self.n_trees,
            "n_energized_feeders": self.n_feeders,
            "n_energized_buses": self.n_buses,
            "counting_identity": self.counting_identity,
            "rootless_trees": self.rootless_trees,
            "endpoint_violations": self.endpoint_violations,
        }


def check_forest(net: Network, v: Mapping[str, int], w: Mapping[str, int],
                 roots: Optional[set[str]] = None) -> ForestReport:
    """Structure check of an energized topology."""
    roots = set(net.roots) if roots is None else set(roots)
    endpoint = [f.id for f in net.feeders
                if w.get(f.id, 0) and not (v.get(f.from_bus, 0) and v.get(f.to_bus, 0))]
    g = nx.MultiGraph()
    g.add_nodes_from(b for b, s in v.items() if s)
    for f in net.feeders:
        if w.get(f.id, 0):
            g.add_edge(f.from_bus, f.to_bus, key=f.id)
    comps = sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])
    forest = g.number_of_edges() == g.number_of_nodes() - len(comps)
    rootless = [c for c in comps if not roots & set(c)]
    return ForestReport(
        is_forest=forest,
        trees=comps,
        rootless_trees=rootless,
        endpoint_violations=endpoint,
        n_feeders=g.number_of_edges(),
        n_buses=g.number_of_nodes(),
        n_trees=len(comps),
    )


# ------------------------------------------------------------------ brute force

@dataclass
class BruteForceResult:
    v: dict[str, int]
    w: dict[str, int]
    objective: float
    key: tuple[str, ...]
    evaluated: int
    feasible: int
    state: Optional[ExactFlowState] = field(default=None, repr=False)


def served_loads(net: Network, v: Mapping[str, int]) -> dict[str, tuple[float, float]]:
    return {b.id: (b.load_p, b.load_q) for b in net.buses if v.get(b.id, 0)}


def exact_limits_ok(net: Network, state: ExactFlowState, gens: Mapping[str, tuple[float, float]],
                    v_tol: float = 0.0, i_rtol: float = 0.0, g_tol: float = 1e-9) -> bool:
    lo, hi = net.v_min ** 2 - v_tol, net.v_max ** 2 + v_tol
    if any(not (lo <= x <= hi) for x in state.v_sqr.values()):
        return False
    for fid, ell in state.i_sqr.items():
        if math.sqrt(ell) > net.feeder(fid).i_max * (1.0 + i_rtol):
            return False
    for b, (p, q) in gens.items():
        bus = net.bus(b)
        if not (bus.gen_p_min - g_tol <= p <= bus.gen_p_max + g_tol):
            return False
        if not (bus.gen_q_min - g_tol <= q <= bus.gen_q_max + g_tol):
            return False
    return True


def brute_force_optimum(net: Network, cfg: RunConfig,
                        cap: int = DEFAULT_ENUMERATION_CAP) -> Optional[BruteForceResult]:
    """Best radial configuration scored with the exact power flow.

    Loads of energized buses are served in full; each tree's slack bus
    balances it at ``v_norm``. Generation at non-slack energized buses must
    be fixed (``gen_min == gen_max``) so the score needs no dispatch
    optimization. Configurations whose exact state breaks a voltage,
    current or generation limit are skipped. Returns None when no
    configuration is exactly feasible.
    """
    minimize = cfg.mode is Mode.RECONFIGURATION
    best: Optional[BruteForceResult] = None
    evaluated = feasible = 0
    for conf in enumerate_radial_configurations(net, cfg, cap):
        evaluated += 1
        g = energized_graph(net, conf.v, conf.w)
        slack_set = {pick_slack(net, comp) for comp in nx.connected_components(g)}
        fixed_gens = {}
        for b, s in conf.v.items():
            if not s or b in slack_set:
                continue
            bus = net.bus(b)
            if bus.gen_p_min != bus.gen_p_max or bus.gen_q_min != bus.gen_q_max:
                raise OracleError(f"bus {b} has dispatchable generation but is not a slack; "
                                  "brute force needs fixed non-slack output")
            if bus.gen_p_max or bus.gen_q_max:
                fixed_gens[b] = (bus.gen_p_max, bus.gen_q_max)
        loads = served_loads(net, conf.v)
        try:
            state = distflow_solve(net, conf.v, conf.w, loads, fixed_gens)
        except SweepDivergence:
            continue
        if not exact_limits_ok(net, state, {**fixed_gens, **state.slack}):
            continue
        feasible += 1
        score = state.losses if minimize else math.fsum(p for p, _ in loads.values())
        key = conf.key
        if best is None:
            better = True
        elif abs(score - best.objective) <= TIE_RTOL * max(1.0, abs(score), abs(best.objective)):
            better = key < best.key
        else:
            better = score < best.objective if minimize else score > best.objective
        if better:
            best = BruteForceResult(dict(conf.v), dict(conf.w), score, key, 0, 0, state)
    if best is not None:
        best.evaluated, best.feasible = evaluated, feasible
    return best


def exact_objective(net: Network, cfg: RunConfig, v: Mapping[str, int],
                    w: Mapping[str, int]) -> Optional[float]:
    """Score one configuration the way :func:`brute_force_optimum` does."""
    g = energized_graph(net, v, w)
    slack_set = {pick_slack(net, comp) for comp in nx.connected_components(g)}
    fixed_gens = {}
    for b, s in v.items():
        bus = net.bus(b)
        if s and b not in slack_set and (bus.gen_p_max or bus.gen_q_max):
            fixed_gens[b] = (bus.gen_p_max, bus.gen_q_max)
    loads = served_loads(net, v)
    try:
        state = distflow_solve(net, v, w, loads, fixed_gens)
    except SweepDivergence:
        return None
    if not exact_limits_ok(net, state, {**fixed_gens, **state.slack}):
        return None
    if cfg.mode is Mode.RECONFIGURATION:
        return state.losses
    return math.fsum(p for p, _ in loads.values())


# ------------------------------------------------------------------ solution check

@dataclass
class SolutionValidation:
    forest: ForestReport
    converged: bool
    message: str = ""
    exact_losses: float = math.nan
    milp_losses: float = math.nan
    loss_tolerance: float = math.nan
    v_sqr_range: tuple[float, float] = (math.nan, math.nan)
    max_current_ratio: float = math.nan
    voltages_ok: bool = False
    currents_ok: bool = False
    losses_ok: bool = False
    state: Optional[ExactFlowState] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.forest.ok and self.converged and self.voltages_ok and self.currents_ok

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "forest": self.forest.as_dict(),
            "converged": self.converged,
            "message": self.message,
            "exact_losses": self.exact_losses,
            "milp_losses": self.milp_losses,
            "loss_tolerance": self.loss_tolerance,
            "losses_ok": self.losses_ok,
            "v_sqr_min": self.v_sqr_range[0],
            "v_sqr_max": self.v_sqr_range[1],
            "voltages_ok": self.voltages_ok,
            "max_current_ratio": self.max_current_ratio,
            "currents_ok": self.currents_ok,
        }


def loss_tolerance(net: Network, bounds, segments: int, w: Mapping[str, int],
                   exact_losses: float) -> float:
    """max(1 % of the exact losses, sum of r * worst-case PWL over-estimate)."""
    pwl_part = 0.0
    for f in net.feeders:
        if w.get(f.id, 0):
            gap = (pwl_max_gap(PwlSpec(segments, bounds.p_max[f.id]))
                   + pwl_max_gap(PwlSpec(segments, bounds.q_max[f.id])))
            pwl_part += f.r * gap / net.v_norm ** 2
    return max(0.01 * abs(exact_losses), pwl_part)


def validate_solution(net: Network, sol: Solution, bounds=None, segments: Optional[int] = None,
                      v_tol: float = 1e-4, i_rtol: float = 1e-3) -> SolutionValidation:
    """Exact power flow on an accepted solution's topology and injections."""
    forest = check_forest(net, sol.v, sol.w)
    out = SolutionValidation(forest=forest, converged=False)
    if not forest.is_forest or forest.rootless_trees:
        out.message = "topology is not a rooted forest"
        return out
    loads = {b: (sol.p_load[b], sol.q_load[b]) for b, s in sol.v.items() if s}
    gens = {b: (sol.p_gen[b], sol.q_gen[b]) for b, s in sol.v.items() if s}
    try:
        state = distflow_solve(net, sol.v, sol.w, loads, gens)
    except SweepDivergence as exc:
        out.message = str(exc)
        return out
    out.state = state
    out.converged = True
    vals = list(state.v_sqr.values())
    out.v_sqr_range = (min(vals), max(vals)) if vals else (math.nan, math.nan)
    out.voltages_ok = all(net.v_min ** 2 - v_tol <= x <= net.v_max ** 2 + v_tol for x in vals)
    ratios = [math.sqrt(i) / net.feeder(fid).i_max for fid, i in state.i_sqr.items()]
    out.max_current_ratio = max(ratios, default=0.0)
    out.currents_ok = out.max_current_ratio <= 1.0 + i_rtol
    out.exact_losses = state.losses
    out.milp_losses = math.fsum(net.feeder(fid).r * i for fid, i in sorted(sol.i_sqr.items()))
    if bounds is not None and segments is not None:
        out.loss_tolerance = loss_tolerance(net, bounds, segments, sol.w, out.exact_losses)
        out.losses_ok = abs(out.milp_losses - out.exact_losses) <= out.loss_tolerance
    return out
