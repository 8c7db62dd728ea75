import math

import pytest
from hypothesis import given, strategies as st

from loadpickup.backends import Solution
from loadpickup.driver import renew_bounds
from loadpickup.metrics import MetricsError, achieved_f_gap, error_indices, relative_error
from loadpickup.model import FeederBounds
from loadpickup.pwl import PwlSpec, pwl_max_gap


def one_feeder(p, q, w=1):
    return Solution(status="optimal", objective=0.0, v={"a": 1, "b": 1}, w={"f": w},
                    p_flow={"f": p}, q_flow={"f": q})


def test_first_segment_is_one_hundred_percent():
    assert relative_error(0.5, 10.0, 10) == pytest.approx(100.0)


def test_breakpoint_is_exact():
    assert relative_error(5.0, 10.0, 10) == 0.0


def test_renewed_bound_keeps_error_small():
    bound = math.sqrt(0.5)
    gap = pwl_max_gap(PwlSpec(10, bound))
    assert gap == pytest.approx(0.00125)
    assert relative_error(0.5, bound, 10) <= gap / 0.25 * 100 <= 0.5


def test_indices_for_one_feeder():
    idx = error_indices(one_feeder(0.5, 5.0), FeederBounds({"f": 10.0}, {"f": 10.0}), 10)
    assert idx.in_use == ["f"]
    assert idx.e_p_mean == pytest.approx(100.0)
    assert idx.e_q_mean == 0.0
    assert idx.per_feeder["f"] == (pytest.approx(100.0), 0.0)
    assert not idx.empty


def test_mean_over_included_feeders():
    sol = Solution(status="optimal", w={"f": 1, "g": 1, "h": 0},
                   p_flow={"f": 0.5, "g": 5.0, "h": 0.5}, q_flow={"f": 1.5, "g": 1e-5, "h": 0.0})
    bounds = FeederBounds({k: 10.0 for k in "fgh"}, {k: 10.0 for k in "fgh"})
    idx = error_indices(sol, bounds, 10)
    assert idx.in_use == ["f", "g"]
    assert idx.e_p_mean == pytest.approx((100.0 + 0.0) / 2)
    # q of g is below the floor: listed, scored 0, kept out of the mean
    assert idx.excluded_q == ["g"] and idx.excluded_p == []
    assert idx.excluded == ["g"]
    assert idx.e_q_mean == pytest.approx(relative_error(1.5, 10.0, 10))


def test_empty_in_use_set_is_flagged():
    idx = error_indices(one_feeder(0.0, 0.0, w=0), FeederBounds({"f": 1.0}, {"f": 1.0}), 10)
    assert idx.empty
    assert (idx.e_p_mean, idx.e_q_mean, idx.e_p_max) == (0.0, 0.0, 0.0)


def test_infeasible_solution_is_rejected():
    with pytest.raises(MetricsError):
        error_indices(Solution(status="infeasible"), FeederBounds({}, {}), 10)


def test_achieved_gap_needs_raw_point():
    assert achieved_f_gap(None, one_feeder(0.1, 0.1)) is None


flows = st.floats(min_value=1e-3, max_value=1.0, allow_nan=False)
shares = st.floats(min_value=0.05, max_value=1.0, allow_nan=False)
lams = st.integers(min_value=1, max_value=60)


@given(flows, flows, lams)
def test_sign_flip_invariance(p, q, lam):
    bounds = FeederBounds({"f": 2.0}, {"f": 2.0})
    a = error_indices(one_feeder(p, q), bounds, lam)
    b = error_indices(one_feeder(-p, -q), bounds, lam)
    assert a.per_feeder == b.per_feeder


@given(shares, shares, lams)
def test_errors_shrink_after_renewal_with_fixed_flows(sp, sq, lam):
    bounds = FeederBounds({"f": 2.0}, {"f": 2.0})
    sol = one_feeder(-2.0 * sp, 2.0 * sq)
    before = error_indices(sol, bounds, lam)
    renewed = renew_bounds(bounds, sol, lam)
    after = error_indices(sol, renewed, lam)
    assert after.per_feeder["f"][0] <= before.per_feeder["f"][0] + 1e-9
    assert after.per_feeder["f"][1] <= before.per_feeder["f"][1] + 1e-9
    assert min(after.per_feeder["f"]) >= 0.0
