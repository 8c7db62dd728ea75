"""Assembly of the piecewise-linearized load pick-up MILP.

Every linear row carries the equation tag it was generated from. Two rows
sharing a ``name`` form one logical constraint: the double-sided
v/w-scaled boxes (voltage box, generation and flow limits) are stored as
two half-rows under one name, while the big-M voltage-drop and PWL
coupling pairs are two named constraints each. Counting logical names this
way reproduces the published variable and constraint counts exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import sparse

from .network import Mode, Network, RunConfig
from .pwl import PwlSpec, pwl_slopes

INF = math.inf

PF_TAGS = ("eq3", "eq4", "eq9", "eq11", "eq12", "eq26")
TOPOLOGY_TAGS = ("eq13", "eq14", "eq15", "eq16", "eq17", "eq18", "eq19", "eq20")
ALL_TAGS = PF_TAGS + TOPOLOGY_TAGS


class StructuralError(AssertionError):
    """The assembled model disagrees with the closed-form size formulas."""


@dataclass(frozen=True)
class FeederBounds:
    """PWL bounds per feeder id: ``p_max`` / ``q_max`` maps."""

    p_max: dict[str, float]
    q_max: dict[str, float]

    def __post_init__(self):
        for name, table in (("p_max", self.p_max), ("q_max", self.q_max)):
            for fid, value in table.items():
                if not value > 0:
                    raise ValueError(f"{name}[{fid}] = {value} must be positive")

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {"p_max": dict(sorted(self.p_max.items())), "q_max": dict(sorted(self.q_max.items()))}


@dataclass(frozen=True)
class Var:
    name: str
    role: str
    element: str
    binary: bool
    lb: float
    ub: float


@dataclass(frozen=True)
class Row:
    name: str
    tag: str
    coeffs: dict[int, float]
    lo: float
    hi: float


@dataclass
class MilpModel:
    network: Network
    config: RunConfig
    bounds: FeederBounds
    big_m: dict
    variables: list[Var] = field(default_factory=list)
    rows: list[Row] = field(default_factory=list)
    minimize: bool = True
    objective: dict[int, float] = field(default_factory=dict)
    index: dict[str, int] = field(default_factory=dict)

    # -- construction helpers
    def add_var(self, name: str, role: str, element: str, lb: float, ub: float,
                binary: bool = False) -> int:
        if name in self.index:
            raise ValueError(f"duplicate variable {name}")
        self.index[name] = len(self.variables)
        self.variables.append(Var(name, role, element, binary, lb, ub))
        return self.index[name]

    def add_row(self, name: str, tag: str, coeffs: dict[int, float],
                lo: float = -INF, hi: float = INF) -> None:
        self.rows.append(Row(name, tag, coeffs, lo, hi))

    def var(self, name: str) -> int:
        return self.index[name]

    @property
    def segments(self) -> int:
        return self.config.segments

    @property
    def binary_indices(self) -> np.ndarray:
        return np.array([k for k, v in enumerate(self.variables) if v.binary], dtype=np.int32)

    @property
    def n_binaries(self) -> int:
        return sum(v.binary for v in self.variables)

    @property
    def n_continuums(self) -> int:
        return sum(not v.binary for v in self.variables)

    # -- numeric views
    def arrays(self):
        """(c, A, row_lo, row_hi, col_lb, col_ub, is_binary) with A in CSR."""
        cached = getattr(self, "_arrays", None)
        if cached is not None:
            return cached
        n = len(self.variables)
        c = np.zeros(n)
        for k, coef in self.objective.items():
            c[k] = coef
        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        for row in self.rows:
            for k, coef in row.coeffs.items():
                indices.append(k)
                data.append(coef)
            indptr.append(len(indices))
        a = sparse.csr_matrix((data, indices, indptr), shape=(len(self.rows), n))
        lo = np.array([r.lo for r in self.rows])
        hi = np.array([r.hi for r in self.rows])
        lb = np.array([v.lb for v in self.variables])
        ub = np.array([v.ub for v in self.variables])
        isbin = np.array([v.binary for v in self.variables])
        self._arrays = (c, a, lo, hi, lb, ub, isbin)
        return self._arrays

    def objective_value(self, x: np.ndarray) -> float:
        return float(sum(coef * x[k] for k, coef in self.objective.items()))

    def row_violations(self, x: np.ndarray) -> np.ndarray:
        """Per-row absolute violation of ``lo <= a.x <= hi`` at point ``x``."""
        _, a, lo, hi, _, _, _ = self.arrays()
        ax = a @ x
        return np.maximum(np.maximum(lo - ax, ax - hi), 0.0)

    def bound_violations(self, x: np.ndarray) -> np.ndarray:
        _, _, _, _, lb, ub, _ = self.arrays()
        return np.maximum(np.maximum(lb - x, x - ub), 0.0)

    def max_violation(self, x: np.ndarray) -> float:
        worst = 0.0
        if self.rows:
            worst = float(self.row_violations(x).max())
        if self.variables:
            worst = max(worst, float(self.bound_violations(x).max()))
        return worst

    def worst_rows(self, x: np.ndarray, top: int = 5) -> list[tuple[str, str, float]]:
        viol = self.row_violations(x)
        order = np.argsort(-viol)[:top]
        return [(self.rows[k].name, self.rows[k].tag, float(viol[k])) for k in order if viol[k] > 0]


# ------------------------------------------------------------------ big-M

def big_m_values(net: Network, bounds: FeederBounds, fixed: Optional[float] = None) -> dict:
    """Big-M constants per switched row family.

    Tight values cover the operating boxes V in [v_min**2, v_max**2],
    I in [0, i_max**2], |P| <= p_max, |Q| <= q_max. ``fixed`` overrides
    every constant.
    """
    fids = [f.id for f in net.feeders]
    if fixed is not None:
        per = {fid: float(fixed) for fid in fids}
        return {"eq9": dict(per), "eq11": float(fixed), "eq12": dict(per),
                "eq19": dict(per), "eq20": dict(per), "eq26": dict(per)}
    v2min, v2max = net.v_min ** 2, net.v_max ** 2
    m9, m12, m26 = {}, {}, {}
    for f in net.feeders:
        p, q = bounds.p_max[f.id], bounds.q_max[f.id]
        i2 = f.i_max ** 2
        m9[f.id] = (v2max - v2min) + 2.0 * (f.r * p + abs(f.x) * q) + f.z_sqr * i2
        m12[f.id] = i2
        m26[f.id] = p * p + q * q + v2max * i2
    return {
        "eq9": m9,
        "eq11": v2max,
        "eq12": m12,
        "eq19": {f.id: bounds.p_max[f.id] for f in net.feeders},
        "eq20": {f.id: bounds.q_max[f.id] for f in net.feeders},
        "eq26": m26,
    }


# ------------------------------------------------------------------ counts

@dataclass(frozen=True)
class ModelCounts:
    binaries: int
    continuums: int
    pf_constraints: int
    topology_constraints: int

    def as_dict(self) -> dict[str, int]:
        return {
            "binaries": self.binaries,
            "continuums": self.continuums,
            "pf_constraints": self.pf_constraints,
            "topology_constraints": self.topology_constraints,
        }

    @property
    def total_constraints(self) -> int:
        return self.pf_constraints + self.topology_constraints


def expected_counts(n_bus: int, n_feeder: int, segments: int) -> ModelCounts:
    """Closed-form model size for a network and segment count."""
    return ModelCounts(
        binaries=n_feeder + n_bus,
        continuums=(7 + 2 * segments) * n_feeder + 5 * n_bus,
        pf_constraints=(13 + 2 * segments) * n_feeder + 3 * n_bus,
        topology_constraints=3 * n_feeder + 4 * n_bus + 1,
    )


def count_model(model: MilpModel) -> ModelCounts:
    """Count variables and logical constraints; check them against the formulas."""
    pf: set[str] = set()
    topo: set[str] = set()
    tag_of: dict[str, str] = {}
    for row in model.rows:
        if tag_of.setdefault(row.name, row.tag) != row.tag:
            raise StructuralError(f"constraint {row.name} carries two tags")
        if row.tag in PF_TAGS:
            pf.add(row.name)
        elif row.tag in TOPOLOGY_TAGS:
            topo.add(row.name)
        else:
            raise StructuralError(f"row {row.name} has unknown tag {row.tag!r}")
    got = ModelCounts(model.n_binaries, model.n_continuums, len(pf), len(topo))
    want = expected_counts(len(model.network.buses), len(model.network.feeders), model.segments)
    for key, value in got.as_dict().items():
        if value != getattr(want, key):
            raise StructuralError(f"{key}: model has {value}, formula gives {getattr(want, key)}")
    return got


def tag_histogram(model: MilpModel) -> dict[str, int]:
    """Number of logical constraints per equation tag."""
    names: dict[str, str] = {}
    for row in model.rows:
        names[row.name] = row.tag
    hist = {tag: 0 for tag in ALL_TAGS}
    for tag in names.values():
        hist[tag] += 1
    return hist


# ------------------------------------------------------------------ build

class ModelError(ValueError):
    pass


def _feeder_state(f, mode: Mode) -> Optional[int]:
    if f.fixed_state is not None:
        return f.fixed_state
    if not f.switchable:
        return 1
    return None


def build_model(net: Network, cfg: RunConfig, bounds: FeederBounds) -> MilpModel:
    """Assemble the LPP-MILP for ``net`` under ``cfg`` with PWL ``bounds``."""
    for f in net.feeders:
        if f.id not in bounds.p_max or f.id not in bounds.q_max:
            raise ModelError(f"missing PWL bound for feeder {f.id}")
    policy = cfg.island_policy
    roots = [b.id for b in net.buses if b.is_root]
    if policy != "derived" and policy > len(roots):
        raise ModelError(f"island count {policy} exceeds the {len(roots)} root-capable buses")

    lam = cfg.segments
    big_m = big_m_values(net, bounds, cfg.big_m)
    m = MilpModel(network=net, config=cfg, bounds=bounds, big_m=big_m)
    v2min, v2max = net.v_min ** 2, net.v_max ** 2
    vn2 = net.v_norm ** 2
    m11 = big_m["eq11"]

    # binaries
    for b in net.buses:
        state = 1 if cfg.mode is Mode.RECONFIGURATION else b.fixed_state
        lo, hi = (0.0, 1.0) if state is None else (float(state), float(state))
        m.add_var(f"v_{b.id}", "v", b.id, lo, hi, binary=True)
    for f in net.feeders:
        state = _feeder_state(f, cfg.mode)
        lo, hi = (0.0, 1.0) if state is None else (float(state), float(state))
        m.add_var(f"w_{f.id}", "w", f.id, lo, hi, binary=True)

    # bus continuums
    for b in net.buses:
        m.add_var(f"PG_{b.id}", "PG", b.id, min(b.gen_p_min, 0.0), max(b.gen_p_max, 0.0))
        m.add_var(f"QG_{b.id}", "QG", b.id, min(b.gen_q_min, 0.0), max(b.gen_q_max, 0.0))
        m.add_var(f"PL_{b.id}", "PL", b.id, min(b.load_p, 0.0), max(b.load_p, 0.0))
        m.add_var(f"QL_{b.id}", "QL", b.id, min(b.load_q, 0.0), max(b.load_q, 0.0))
        m.add_var(f"V_{b.id}", "Vsqr", b.id, 0.0, v2max + m11)

    # feeder continuums
    for f in net.feeders:
        for y, ybar in (("P", bounds.p_max[f.id]), ("Q", bounds.q_max[f.id])):
            m.add_var(f"{y}_{f.id}", y, f.id, -ybar, ybar)
            m.add_var(f"{y}p_{f.id}", y + "+", f.id, 0.0, ybar)
            m.add_var(f"{y}m_{f.id}", y + "-", f.id, 0.0, ybar)
            for k in range(1, lam + 1):
                m.add_var(f"d{y}_{f.id}_{k}", "d" + y, f.id, 0.0, ybar / lam)
        m.add_var(f"I_{f.id}", "Isqr", f.id, 0.0, f.i_max ** 2 + big_m["eq12"][f.id])

    ix = m.index

    # power balance
    out_of: dict[str, list] = {b.id: [] for b in net.buses}
    into: dict[str, list] = {b.id: [] for b in net.buses}
    for f in net.feeders:
        out_of[f.from_bus].append(f)
        into[f.to_bus].append(f)
    for b in net.buses:
        for y, res, gen, load, tag in (("P", "r", "PG", "PL", "eq3"), ("Q", "x", "QG", "QL", "eq4")):
            coeffs: dict[int, float] = {}
            for f in into[b.id]:
                coeffs[ix[f"{y}_{f.id}"]] = coeffs.get(ix[f"{y}_{f.id}"], 0.0) + 1.0
            for f in out_of[b.id]:
                coeffs[ix[f"{y}_{f.id}"]] = coeffs.get(ix[f"{y}_{f.id}"], 0.0) - 1.0
                coeffs[ix[f"I_{f.id}"]] = -getattr(f, res)
            coeffs[ix[f"{gen}_{b.id}"]] = 1.0
            coeffs[ix[f"{load}_{b.id}"]] = -1.0
            m.add_row(f"{tag}_{b.id}", tag, coeffs, 0.0, 0.0)

    # voltage box, switched by v
    for b in net.buses:
        vb, vv = ix[f"V_{b.id}"], ix[f"v_{b.id}"]
        m.add_row(f"eq11_{b.id}", "eq11", {vb: 1.0, vv: -m11}, lo=v2min - m11)
        m.add_row(f"eq11_{b.id}", "eq11", {vb: 1.0, vv: m11}, hi=v2max + m11)

    # feeder rows
    for f in net.feeders:
        w = ix[f"w_{f.id}"]
        vi, vj = ix[f"V_{f.from_bus}"], ix[f"V_{f.to_bus}"]
        p, q, i_sq = ix[f"P_{f.id}"], ix[f"Q_{f.id}"], ix[f"I_{f.id}"]
        m9 = big_m["eq9"][f.id]
        # V_i - V_j - 2(rP + xQ) - z^2 I within +-(1 - w) M
        drop = {vi: 1.0, vj: -1.0, p: -2.0 * f.r, q: -2.0 * f.x, i_sq: -f.z_sqr}
        m.add_row(f"eq9lo_{f.id}", "eq9", {**drop, w: -m9}, lo=-m9)
        m.add_row(f"eq9hi_{f.id}", "eq9", {**drop, w: m9}, hi=m9)

        m12 = big_m["eq12"][f.id]
        m.add_row(f"eq12_{f.id}", "eq12", {i_sq: 1.0, w: m12}, hi=f.i_max ** 2 + m12)

        # v_norm^2 I - f(P) - f(Q) within +-(1 - w) M
        m26 = big_m["eq26"][f.id]
        couple: dict[int, float] = {i_sq: vn2}
        for y, ybar in (("P", bounds.p_max[f.id]), ("Q", bounds.q_max[f.id])):
            slopes = pwl_slopes(PwlSpec(lam, ybar))
            for k in range(1, lam + 1):
                couple[ix[f"d{y}_{f.id}_{k}"]] = -float(slopes[k - 1])
        m.add_row(f"eq26lo_{f.id}", "eq26", {**couple, w: -m26}, lo=-m26)
        m.add_row(f"eq26hi_{f.id}", "eq26", {**couple, w: m26}, hi=m26)

        for y, ybar in (("P", bounds.p_max[f.id]), ("Q", bounds.q_max[f.id])):
            yv, yp, ym = ix[f"{y}_{f.id}"], ix[f"{y}p_{f.id}"], ix[f"{y}m_{f.id}"]
            deltas = [ix[f"d{y}_{f.id}_{k}"] for k in range(1, lam + 1)]
            m.add_row(f"eq28{y}_{f.id}", "eq26", {yv: 1.0, yp: -1.0, ym: 1.0}, 0.0, 0.0)
            sum_row = {yp: 1.0, ym: 1.0}
            for d in deltas:
                sum_row[d] = -1.0
            m.add_row(f"eq29{y}_{f.id}", "eq26", sum_row, 0.0, 0.0)
            for k, d in enumerate(deltas, start=1):
                m.add_row(f"eq30{y}_{f.id}_{k}", "eq26", {d: 1.0}, 0.0, ybar / lam)
            m.add_row(f"eq32{y}p_{f.id}", "eq26", {yp: 1.0}, lo=0.0)
            m.add_row(f"eq32{y}m_{f.id}", "eq26", {ym: 1.0}, lo=0.0)

    # radiality: sum w - sum v (+ sum of root v) = -N_s (or 0)
    coeffs = {ix[f"w_{f.id}"]: 1.0 for f in net.feeders}
    for b in net.buses:
        coeffs[ix[f"v_{b.id}"]] = -1.0
    if policy == "derived":
        for r in roots:
            coeffs[ix[f"v_{r}"]] += 1.0
        rhs = 0.0
    else:
        rhs = -float(policy)
    m.add_row("eq13", "eq13", coeffs, rhs, rhs)

    for f in net.feeders:
        w = ix[f"w_{f.id}"]
        m.add_row(f"eq14_{f.id}", "eq14",
                  {ix[f"v_{f.from_bus}"]: 1.0, ix[f"v_{f.to_bus}"]: 1.0, w: -2.0}, lo=0.0)

    for b in net.buses:
        vv = ix[f"v_{b.id}"]
        for var, lo_par, hi_par, tag in (
            ("PG", b.gen_p_min, b.gen_p_max, "eq15"),
            ("QG", b.gen_q_min, b.gen_q_max, "eq16"),
        ):
            k = ix[f"{var}_{b.id}"]
            m.add_row(f"{tag}_{b.id}", tag, {k: 1.0, vv: -lo_par}, lo=0.0)
            m.add_row(f"{tag}_{b.id}", tag, {k: 1.0, vv: -hi_par}, hi=0.0)
        m.add_row(f"eq17_{b.id}", "eq17", {ix[f"PL_{b.id}"]: 1.0, vv: -b.load_p}, 0.0, 0.0)
        m.add_row(f"eq18_{b.id}", "eq18", {ix[f"QL_{b.id}"]: 1.0, vv: -b.load_q}, 0.0, 0.0)

    for f in net.feeders:
        w = ix[f"w_{f.id}"]
        for y, tag in (("P", "eq19"), ("Q", "eq20")):
            k = ix[f"{y}_{f.id}"]
            mm = big_m[tag][f.id]
            m.add_row(f"{tag}_{f.id}", tag, {k: 1.0, w: -mm}, hi=0.0)
            m.add_row(f"{tag}_{f.id}", tag, {k: 1.0, w: mm}, lo=0.0)

    if cfg.mode is Mode.RECONFIGURATION:
        m.minimize = True
        m.objective = {ix[f"I_{f.id}"]: f.r for f in net.feeders if f.r != 0.0}
    else:
        m.minimize = False
        m.objective = {ix[f"PL_{b.id}"]: 1.0 for b in net.buses}
    return m


# ------------------------------------------------------------------ LP text

def _fmt(x: float) -> str:
    return repr(float(x))


def _terms(coeffs: Iterable[tuple[str, float]]) -> str:
    parts = []
    for name, coef in coeffs:
        if coef == 0.0:
            continue
        sign = "-" if coef < 0 else "+"
        parts.append(f"{sign} {_fmt(abs(coef))} {name}")
    if not parts:
        return "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def write_lp(model: MilpModel) -> str:
    """Render the model in CPLEX LP text format.

    Ranged rows become a ``_lo``/``_hi`` pair; rows sharing a logical name
    get numeric suffixes. Each row is preceded by a comment with its tag.
    """
    names = [v.name for v in model.variables]
    out = [f"\\ load pick-up MILP: {model.network.name or 'network'}",
           f"\\ mode={model.config.mode.value} segments={model.segments}"]
    out.append("Minimize" if model.minimize else "Maximize")
    out.append(" obj: " + _terms((names[k], c) for k, c in sorted(model.objective.items())))
    out.append("Subject To")
    seen: dict[str, int] = {}
    for row in model.rows:
        n = seen.get(row.name, 0)
        seen[row.name] = n + 1
        label = row.name if n == 0 else f"{row.name}_{n}"
        expr = _terms((names[k], c) for k, c in sorted(row.coeffs.items()))
        out.append(f"\\ {row.tag}")
        if row.lo == row.hi:
            out.append(f" {label}: {expr} = {_fmt(row.lo)}")
            continue
        if row.lo > -INF:
            out.append(f" {label}_lo: {expr} >= {_fmt(row.lo)}")
        if row.hi < INF:
            out.append(f" {label}_hi: {expr} <= {_fmt(row.hi)}")
    out.append("Bounds")
    for v in model.variables:
        out.append(f" {_fmt(v.lb)} <= {v.name} <= {_fmt(v.ub)}")
    out.append("Binaries")
    out.append(" " + " ".join(v.name for v in model.variables if v.binary))
    out.append("End")
    return "\n".join(out) + "\n"
