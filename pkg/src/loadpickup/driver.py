"""Multi-step solution procedure.

Step 0 builds the model with the widest sound PWL bounds. Each later step
shrinks the bound of every in-use feeder to the square root of the PWL
value its flow had, rebuilds and re-solves, until the mean error indices
drop under the thresholds or the iteration cap is reached.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backends import Solution
from .metrics import ErrorIndices, achieved_f_gap, error_indices
from .model import FeederBounds, MilpModel, ModelCounts, build_model, count_model
from .network import Network, RunConfig, validate_network
from .oracle import SolutionValidation, check_forest, validate_solution
from .pwl import CLAMP_SLACK, PwlSpec, pwl_eval, pwl_max_gap, pwl_value, saturated_decomposition

BOUND_FLOOR = 1e-6
ROBUSTNESS_TOL = 1e-8


class DriverError(RuntimeError):
    pass


class InvalidNetworkError(DriverError):
    def __init__(self, report):
        super().__init__("network failed validation:\n" + "\n".join(str(v) for v in report))
        self.report = report


class RobustnessViolation(DriverError):
    """A later step found no solution although the previous one must fit."""

    def __init__(self, step: int, prev_bounds: FeederBounds, bounds: FeederBounds,
                 residual: Optional[float]):
        super().__init__(
            f"step {step} is infeasible; the step {step - 1} solution should remain "
            f"feasible (carried-over residual {residual!r})")
        self.step = step
        self.prev_bounds = prev_bounds
        self.bounds = bounds
        self.residual = residual


class TopologyError(DriverError):
    pass


class BoundConsistencyError(DriverError):
    pass


@dataclass
class IterationRecord:
    g: int
    bounds_in: FeederBounds
    solution: Solution
    errors: Optional[ErrorIndices]
    model_counts: ModelCounts
    wall_time: float
    # max row/bound violation of the previous step's point in this step's model
    carried_residual: Optional[float] = None
    achieved_f_gap: Optional[float] = None

    @property
    def e_p_mean(self) -> float:
        return self.errors.e_p_mean if self.errors else math.nan

    @property
    def e_q_mean(self) -> float:
        return self.errors.e_q_mean if self.errors else math.nan

    @property
    def per_feeder_errors(self) -> dict[str, tuple[float, float]]:
        return self.errors.per_feeder if self.errors else {}

    def as_dict(self, timing: bool = True) -> dict:
        out = {
            "g": self.g,
            "bounds_in": self.bounds_in.as_dict(),
            "solution": self.solution.as_dict(timing=timing),
            "errors": self.errors.as_dict() if self.errors else None,
            "model_counts": self.model_counts.as_dict(),
            "carried_residual": self.carried_residual,
            "achieved_f_gap": self.achieved_f_gap,
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class RunReport:
    config: RunConfig
    backend: str
    network_name: str
    iterations: list[IterationRecord] = field(default_factory=list)
    final: Optional[Solution] = None
    termination: str = "infeasible"
    validation: Optional[SolutionValidation] = None

    @property
    def ok(self) -> bool:
        return self.termination != "infeasible" and self.final is not None and self.final.feasible

    @property
    def total_rows(self) -> int:
        return sum(r.model_counts.total_constraints for r in self.iterations)

    def as_dict(self, timing: bool = True) -> dict:
        return {
            "network": self.network_name,
            "backend": self.backend,
            "config": self.config.as_dict(),
            "termination": self.termination,
            "iterations": [r.as_dict(timing) for r in self.iterations],
            "final": self.final.as_dict(timing=timing) if self.final else None,
            "validation": self.validation.as_dict() if self.validation else None,
        }


def init_bounds(net: Network) -> FeederBounds:
    """Widest bounds any feasible flow can reach: v_max * i_max."""
    vals = {f.id: net.v_max * f.i_max for f in net.feeders}
    return FeederBounds(dict(vals), dict(vals))


def _renew_one(y: float, prev: float, segments: int) -> float:
    if abs(y) > prev * (1.0 + CLAMP_SLACK):
        raise BoundConsistencyError(f"flow {y!r} exceeds its PWL bound {prev!r}")
    a = min(abs(y), prev)
    # the root can land an ulp off either side of [|y|, prev]
    new = min(max(math.sqrt(pwl_value(a, prev, segments)), a), prev)
    return max(new, BOUND_FLOOR)


def renew_bounds(prev: FeederBounds, sol: Solution, segments: int) -> FeederBounds:
    """Shrink the bounds of the in-use feeders to the root of their PWL value."""
    if not sol.feasible:
        raise DriverError(f"cannot renew bounds from a {sol.status!r} solution")
    p_new = dict(prev.p_max)
    q_new = dict(prev.q_max)
    for fid in sol.energized_feeders:
        p_new[fid] = _renew_one(sol.p_flow[fid], prev.p_max[fid], segments)
        q_new[fid] = _renew_one(sol.q_flow[fid], prev.q_max[fid], segments)
    return FeederBounds(p_new, q_new)


def carry_over_point(prev_model: MilpModel, prev_sol: Solution, model: MilpModel) -> np.ndarray:
    """Previous step's point expressed in the columns of ``model``.

    Binaries and physical quantities are copied by name. The PWL split of
    every in-use feeder is rebuilt on the new bounds with all segments
    full: the renewed bound is the root of the previous PWL value, so the
    full fill reproduces the previous coupling term exactly. Feeders out of
    use keep a zero split.
    """
    x_prev = prev_sol.x
    if x_prev is None:
        raise DriverError("previous solution carries no raw point")
    prev_ix = prev_model.index
    x = np.zeros(len(model.variables))
    for k, var in enumerate(model.variables):
        x[k] = x_prev[prev_ix[var.name]]
    ix = model.index
    lam = model.segments
    for f in model.network.feeders:
        on = prev_sol.w[f.id] == 1
        for y, bnd in (("P", model.bounds.p_max), ("Q", model.bounds.q_max)):
            spec = PwlSpec(lam, bnd[f.id])
            val = x[ix[f"{y}_{f.id}"]]
            dec = saturated_decomposition(val, spec) if on else pwl_eval(val, spec)[1]
            x[ix[f"{y}p_{f.id}"]] = dec.y_plus
            x[ix[f"{y}m_{f.id}"]] = dec.y_minus
            for k in range(lam):
                x[ix[f"d{y}_{f.id}_{k + 1}"]] = dec.deltas[k]
    return x


def carried_residual(prev_model: MilpModel, prev_sol: Solution, model: MilpModel) -> float:
    return model.max_violation(carry_over_point(prev_model, prev_sol, model))


def check_bound_monotonicity(prev: FeederBounds, new: FeederBounds) -> None:
    for table_prev, table_new, label in ((prev.p_max, new.p_max, "p"), (prev.q_max, new.q_max, "q")):
        for fid, b in table_new.items():
            if b > table_prev[fid] and b != BOUND_FLOOR:
                raise BoundConsistencyError(
                    f"{label} bound of {fid} grew from {table_prev[fid]!r} to {b!r}")


def run_multistep(net: Network, cfg: RunConfig, backend, validate: bool = True) -> RunReport:
    """Run the multi-step procedure and validate the final topology."""
    report_v = validate_network(net)
    if not report_v.ok:
        raise InvalidNetworkError(report_v)
    report = RunReport(config=cfg, backend=getattr(backend, "name", type(backend).__name__),
                       network_name=net.name)
    bounds = init_bounds(net)
    prev_model: Optional[MilpModel] = None
    prev_sol: Optional[Solution] = None
    prev_bounds: Optional[FeederBounds] = None
    g = 0
    while True:
        t0 = time.perf_counter()
        model = build_model(net, cfg, bounds)
        counts = count_model(model)
        residual = None
        if prev_sol is not None:
            residual = carried_residual(prev_model, prev_sol, model)
        sol = backend.solve(model, gap=cfg.mip_gap, warm=prev_sol)
        elapsed = time.perf_counter() - t0

        if not sol.feasible:
            if g == 0:
                report.iterations.append(IterationRecord(g, bounds, sol, None, counts, elapsed))
                report.termination = "infeasible"
                return report
            raise RobustnessViolation(g, prev_bounds, bounds, residual)

        forest = check_forest(net, sol.v, sol.w)
        if not forest.ok:
            raise TopologyError(f"step {g} returned a non-radial topology: {forest.as_dict()}")

        errs = error_indices(sol, bounds, cfg.segments)
        rec = IterationRecord(g, bounds, sol, errs, counts, elapsed, residual,
                              achieved_f_gap(model, sol))
        report.iterations.append(rec)

        if errs.e_p_mean <= cfg.eps_p and errs.e_q_mean <= cfg.eps_q:
            report.termination = "threshold-met"
            break
        if g >= cfg.max_iters:
            report.termination = "iteration-cap"
            break
        new_bounds = renew_bounds(bounds, sol, cfg.segments)
        check_bound_monotonicity(bounds, new_bounds)
        prev_model, prev_sol, prev_bounds = model, sol, bounds
        bounds = new_bounds
        g += 1

    report.final = report.iterations[-1].solution
    if validate:
        report.validation = validate_solution(net, report.final, report.iterations[-1].bounds_in,
                                              cfg.segments)
    return report


def error_supremum(bounds: FeederBounds, segments: int) -> dict[str, tuple[float, float]]:
    """Worst-case PWL over-estimate per feeder under ``bounds``."""
    return {fid: (pwl_max_gap(PwlSpec(segments, bounds.p_max[fid])),
                  pwl_max_gap(PwlSpec(segments, bounds.q_max[fid])))
            for fid in bounds.p_max}
