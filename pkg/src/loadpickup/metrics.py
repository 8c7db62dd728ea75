"""Relative error of the PWL squares over the feeders in use."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .backends import Solution
from .model import FeederBounds, MilpModel
from .pwl import pwl_value

DENOM_FLOOR = 1e-8


class MetricsError(ValueError):
    pass


@dataclass
class ErrorIndices:
    in_use: list[str]
    per_feeder: dict[str, tuple[float, float]]
    e_p_mean: float
    e_q_mean: float
    excluded_p: list[str] = field(default_factory=list)
    excluded_q: list[str] = field(default_factory=list)
    empty: bool = False

    @property
    def excluded(self) -> list[str]:
        return sorted(set(self.excluded_p) | set(self.excluded_q))

    @property
    def e_p_max(self) -> float:
        vals = [p for fid, (p, _) in self.per_feeder.items() if fid not in self.excluded_p]
        return max(vals, default=0.0)

    @property
    def e_q_max(self) -> float:
        vals = [q for fid, (_, q) in self.per_feeder.items() if fid not in self.excluded_q]
        return max(vals, default=0.0)

    def as_dict(self) -> dict:
        return {
            "in_use": list(self.in_use),
            "per_feeder": {k: [p, q] for k, (p, q) in sorted(self.per_feeder.items())},
            "e_p_mean": self.e_p_mean,
            "e_q_mean": self.e_q_mean,
            "e_p_max": self.e_p_max,
            "e_q_max": self.e_q_max,
            "excluded_p": list(self.excluded_p),
            "excluded_q": list(self.excluded_q),
            "empty": self.empty,
        }


def relative_error(y: float, bound: float, segments: int) -> float:
    """Percent over-estimate of y**2 by the canonical PWL value."""
    sq = y * y
    return abs(pwl_value(y, bound, segments) - sq) / sq * 100.0


def error_indices(sol: Solution, bounds: FeederBounds, segments: int,
                  denom_floor: float = DENOM_FLOOR) -> ErrorIndices:
    """Per-feeder and mean PWL errors of ``sol`` under ``bounds``.

    A feeder whose squared flow is below ``denom_floor`` gets a 0 entry,
    is listed as excluded for that quantity and stays out of the mean.
    """
    if not sol.feasible:
        raise MetricsError(f"cannot score a solution with status {sol.status!r}")
    in_use = sol.energized_feeders
    if not in_use:
        return ErrorIndices([], {}, 0.0, 0.0, empty=True)
    per: dict[str, tuple[float, float]] = {}
    ex_p: list[str] = []
    ex_q: list[str] = []
    sum_p = sum_q = 0.0
    for fid in in_use:
        p, q = sol.p_flow[fid], sol.q_flow[fid]
        if p * p < denom_floor:
            ex_p.append(fid)
            e_p = 0.0
        else:
            e_p = relative_error(p, bounds.p_max[fid], segments)
            sum_p += e_p
        if q * q < denom_floor:
            ex_q.append(fid)
            e_q = 0.0
        else:
            e_q = relative_error(q, bounds.q_max[fid], segments)
            sum_q += e_q
        per[fid] = (e_p, e_q)
    n_p = len(in_use) - len(ex_p)
    n_q = len(in_use) - len(ex_q)
    return ErrorIndices(
        in_use=in_use,
        per_feeder=per,
        e_p_mean=sum_p / n_p if n_p else 0.0,
        e_q_mean=sum_q / n_q if n_q else 0.0,
        excluded_p=ex_p,
        excluded_q=ex_q,
    )


def achieved_f_gap(model: MilpModel, sol: Solution) -> Optional[float]:
    """Largest |solver segment sum - canonical value| over the feeders in use."""
    if sol.x is None:
        return None
    worst = 0.0
    for fid in sol.energized_feeders:
        for qty, flows, bounds in (("P", sol.p_flow, model.bounds.p_max),
                                   ("Q", sol.q_flow, model.bounds.q_max)):
            canon = pwl_value(flows[fid], bounds[fid], model.segments)
            worst = max(worst, abs(sol.achieved_f(model, fid, qty) - canon))
    return worst if math.isfinite(worst) else None
