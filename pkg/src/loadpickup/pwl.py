"""Piecewise-linear over-approximation of y**2 on [-bound, bound].

The approximation splits ``|y|`` into ``segments`` equal-width pieces with
slopes ``(2k - 1) * bound / segments``; filling them in order reproduces
the chord interpolant of y**2 through the breakpoints ``k * bound /
segments``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

#: Relative slack within which an out-of-range argument is clamped.
CLAMP_SLACK = 1e-9
# rounding-level overshoot is clamped without a warning
_ULP_SLACK = 8 * np.finfo(float).eps


class PwlRangeError(ValueError):
    def __init__(self, y: float, bound: float):
        super().__init__(f"|y| = {abs(y)!r} exceeds PWL bound {bound!r}")
        self.y = y
        self.bound = bound


@dataclass(frozen=True)
class PwlSpec:
    segments: int
    bound: float

    def __post_init__(self):
        if int(self.segments) != self.segments or self.segments < 1:
            raise ValueError(f"segments must be a positive integer, got {self.segments}")
        if not (self.bound > 0 and math.isfinite(self.bound)):
            raise ValueError(f"bound must be positive and finite, got {self.bound}")

    @property
    def width(self) -> float:
        return self.bound / self.segments

    @cached_property
    def slopes(self) -> np.ndarray:
        return pwl_slopes(self)


@dataclass(frozen=True)
class PwlDecomposition:
    y_plus: float
    y_minus: float
    deltas: tuple[float, ...]
    value: float


def pwl_slopes(spec: PwlSpec) -> np.ndarray:
    k = np.arange(1, spec.segments + 1, dtype=float)
    return (2.0 * k - 1.0) * spec.bound / spec.segments


def _magnitude(y: float, bound: float) -> float:
    a = abs(float(y))
    if a > bound:
        if a > bound * (1.0 + CLAMP_SLACK):
            raise PwlRangeError(y, bound)
        if a - bound > _ULP_SLACK * bound:
            warnings.warn(f"clamping |y|={a!r} to PWL bound {bound!r}", RuntimeWarning, stacklevel=3)
        a = bound
    return a


def pwl_value(y: float, bound: float, segments: int) -> float:
    """Canonical value of f(y, bound, segments) without building the fill."""
    a = _magnitude(y, bound)
    w = bound / segments
    k = min(int(a // w), segments)
    rest = a - k * w
    if rest < 0.0:
        rest = 0.0
    return k * k * w * w + (2 * k + 1) * w * rest if k < segments else bound * bound


def pwl_eval(y: float, spec: PwlSpec) -> tuple[float, PwlDecomposition]:
    """Greedy (in-order) segment fill of ``|y|`` and the resulting value."""
    a = _magnitude(y, spec.bound)
    w = spec.width
    n = spec.segments
    k = min(int(a // w), n)
    deltas = [w] * k
    if k < n:
        deltas.append(max(a - k * w, 0.0))
        deltas.extend([0.0] * (n - k - 1))
    value = pwl_value(a, spec.bound, n)
    y = float(y)
    dec = PwlDecomposition(
        y_plus=a if y >= 0 else 0.0,
        y_minus=a if y < 0 else 0.0,
        deltas=tuple(deltas),
        value=value,
    )
    return value, dec


def saturated_decomposition(y: float, spec: PwlSpec) -> PwlDecomposition:
    """Decomposition of ``y`` with every segment full, so f = bound**2.

    Both halves of the sign split are positive unless ``|y| == bound``;
    this is the fill that keeps a point whose square was previously
    approximated by ``bound**2`` feasible after the bound is renewed.
    """
    a = _magnitude(y, spec.bound)
    y = math.copysign(a, float(y))
    b = spec.bound
    return PwlDecomposition(
        y_plus=0.5 * (b + y),
        y_minus=0.5 * (b - y),
        deltas=(spec.width,) * spec.segments,
        value=b * b,
    )


def pwl_max_gap(spec: PwlSpec) -> float:
    """Largest over-approximation f(y) - y**2, reached mid-segment."""
    return spec.width ** 2 / 4.0
