import itertools
import re

import numpy as np
import pytest

from loadpickup.driver import init_bounds
from loadpickup.model import (
    ALL_TAGS,
    FeederBounds,
    ModelError,
    StructuralError,
    big_m_values,
    build_model,
    count_model,
    expected_counts,
    tag_histogram,
    write_lp,
)
from loadpickup.network import Bus, Feeder, Mode, Network, RunConfig
from loadpickup.oracle import distflow_solve, served_loads
from loadpickup.pwl import PwlSpec, pwl_eval

from conftest import fixture13, substation, triangle, two_bus


def meshed(n_bus, n_feeder):
    """Path through all buses plus chords, no parallel feeders."""
    buses = [substation("b0")] + [Bus(f"b{k}", load_p=0.01, load_q=0.005) for k in range(1, n_bus)]
    pairs = [(k, k + 1) for k in range(n_bus - 1)]
    pairs += [(a, b) for a in range(n_bus) for b in range(a + 2, n_bus)]
    feeders = [Feeder(f"f{m}", f"b{a}", f"b{b}", 0.01, 0.01, 1.0) for m, (a, b) in enumerate(pairs[:n_feeder])]
    assert len(feeders) == n_feeder
    return Network(tuple(buses), tuple(feeders))


def row_activity(row, x):
    return sum(c * x[k] for k, c in row.coeffs.items())


@pytest.mark.parametrize("n_bus, n_feeder, lam", [(4, 3, 2), (2, 1, 2), (5, 6, 7), (8, 12, 1)])
@pytest.mark.parametrize("mode", list(Mode))
def test_counts_match_formulas(n_bus, n_feeder, lam, mode):
    net = meshed(n_bus, n_feeder)
    model = build_model(net, RunConfig(mode=mode, segments=lam), init_bounds(net))
    assert count_model(model) == expected_counts(n_bus, n_feeder, lam)


def test_count_examples():
    assert expected_counts(2, 1, 2).continuums == 21
    small = expected_counts(4, 3, 2)
    assert (small.binaries, small.continuums, small.topology_constraints) == (7, 53, 26)
    # 51 would drop the per-segment rows; the closed form gives 17 * 3 + 12
    assert small.pf_constraints == 63
    fx = expected_counts(13, 15, 10)
    assert fx.as_dict() == {"binaries": 28, "continuums": 470, "pf_constraints": 534,
                            "topology_constraints": 98}


def test_fixture_model_counts():
    net = fixture13()
    model = build_model(net, RunConfig(), init_bounds(net))
    assert count_model(model).as_dict() == expected_counts(13, 15, 10).as_dict()


def test_feederless_network():
    net = Network((substation("s", load_p=0.1),), ())
    model = build_model(net, RunConfig(), FeederBounds({}, {}))
    counts = count_model(model)
    assert counts.binaries == 1
    assert counts.pf_constraints == 3


def test_count_model_names_discrepancy():
    net = two_bus()
    model = build_model(net, RunConfig(segments=2), init_bounds(net))
    model.rows.append(type(model.rows[0])("extra", "eq3", {}, 0.0, 0.0))
    with pytest.raises(StructuralError, match="pf_constraints"):
        count_model(model)


def test_every_row_is_tagged_and_references_known_columns():
    net = fixture13()
    model = build_model(net, RunConfig(), init_bounds(net))
    n = len(model.variables)
    for row in model.rows:
        assert row.tag in ALL_TAGS
        assert all(0 <= k < n for k in row.coeffs)
    hist = tag_histogram(model)
    n_b, n_f, lam = 13, 15, 10
    assert hist["eq3"] == hist["eq4"] == hist["eq11"] == n_b
    assert hist["eq9"] == 2 * n_f
    assert hist["eq12"] == n_f
    assert hist["eq26"] == (2 * lam + 10) * n_f
    assert hist["eq13"] == 1
    assert hist["eq14"] == hist["eq19"] == hist["eq20"] == n_f
    assert hist["eq15"] == hist["eq16"] == hist["eq17"] == hist["eq18"] == n_b


def test_missing_bound_and_island_count_errors():
    net = two_bus()
    with pytest.raises(ModelError):
        build_model(net, RunConfig(), FeederBounds({}, {}))
    with pytest.raises(ModelError):
        build_model(net, RunConfig(n_s=2), init_bounds(net))


def test_big_m_example():
    net = Network((substation("s"), Bus("a")), (Feeder("f", "s", "a", 0.01, 0.01, 3.0),))
    m = big_m_values(net, FeederBounds({"f": 3.0}, {"f": 3.0}))
    assert m["eq9"]["f"] == pytest.approx((1.1025 - 0.9025) + 2 * (0.03 + 0.03) + 0.0002 * 9)
    assert m["eq9"]["f"] == pytest.approx(0.3218)
    assert m["eq11"] == pytest.approx(1.1025)
    assert m["eq12"]["f"] == 9.0
    assert m["eq19"]["f"] == m["eq20"]["f"] == 3.0


def test_fixed_big_m_everywhere():
    net = triangle()
    m = big_m_values(net, init_bounds(net), fixed=1e4)
    assert m["eq11"] == 1e4
    for tag in ("eq9", "eq12", "eq19", "eq20", "eq26"):
        assert set(m[tag].values()) == {1e4}


def test_switched_pairs_relax_over_operating_box():
    net = Network((substation("s"), Bus("a", load_p=0.1)), (Feeder("f", "s", "a", 0.03, -0.02, 1.5),))
    bounds = FeederBounds({"f": 1.2}, {"f": 0.7})
    model = build_model(net, RunConfig(segments=4), bounds)
    ix = model.index
    spec_p, spec_q = PwlSpec(4, 1.2), PwlSpec(4, 0.7)
    rows = [r for r in model.rows if r.name.startswith(("eq9", "eq26lo", "eq26hi"))]
    assert len(rows) == 4
    v2 = (net.v_min**2, net.v_max**2)
    corners = itertools.product(v2, v2, (-1.2, 1.2), (-0.7, 0.7), (0.0, 1.5**2), (0.0, 1.0), (0.0, 1.0))
    for vi, vj, p, q, i_sq, fill_p, fill_q in corners:
        x = np.zeros(len(model.variables))
        x[ix["v_s"]] = x[ix["v_a"]] = 1.0
        x[ix["w_f"]] = 0.0
        x[ix["V_s"]], x[ix["V_a"]] = vi, vj
        x[ix["P_f"]], x[ix["Q_f"]], x[ix["I_f"]] = p, q, i_sq
        for y, spec, fill in (("P", spec_p, fill_p), ("Q", spec_q, fill_q)):
            for k in range(1, 5):
                x[ix[f"d{y}_f_{k}"]] = fill * spec.width
        for row in rows:
            act = row_activity(row, x)
            assert row.lo - 1e-12 <= act <= row.hi + 1e-12, (row.name, vi, vj, p, q, i_sq)


def test_exact_flow_satisfies_model_rows():
    net = triangle(r_expensive=0.05)
    bounds = init_bounds(net)
    model = build_model(net, RunConfig(segments=10), bounds)
    v = {b.id: 1 for b in net.buses}
    w = {"sa": 1, "ab": 1, "sb": 0}
    loads = served_loads(net, v)
    state = distflow_solve(net, v, w, loads)
    ix = model.index
    x = np.zeros(len(model.variables))
    for b in net.buses:
        x[ix[f"v_{b.id}"]] = 1.0
        x[ix[f"V_{b.id}"]] = state.v_sqr[b.id]
        x[ix[f"PL_{b.id}"]], x[ix[f"QL_{b.id}"]] = loads[b.id]
    x[ix["PG_s"]], x[ix["QG_s"]] = state.slack["s"]
    for f in net.feeders:
        x[ix[f"w_{f.id}"]] = w[f.id]
        if not w[f.id]:
            continue
        x[ix[f"P_{f.id}"]] = state.p_flow[f.id]
        x[ix[f"Q_{f.id}"]] = state.q_flow[f.id]
        x[ix[f"I_{f.id}"]] = state.i_sqr[f.id]
        for y, table in (("P", bounds.p_max), ("Q", bounds.q_max)):
            _, dec = pwl_eval(x[ix[f"{y}_{f.id}"]], PwlSpec(10, table[f.id]))
            x[ix[f"{y}p_{f.id}"]], x[ix[f"{y}m_{f.id}"]] = dec.y_plus, dec.y_minus
            for k, d in enumerate(dec.deltas, start=1):
                x[ix[f"d{y}_{f.id}_{k}"]] = d
    for row in model.rows:
        act = row_activity(row, x)
        if row.name.startswith("eq26lo") or row.name.startswith("eq26hi"):
            continue
        assert row.lo - 1e-9 <= act <= row.hi + 1e-9, row.name
    # the squares enter through an over-approximation
    for fid in ("sa", "ab"):
        f = net.feeder(fid)
        pwl_sum = (pwl_eval(x[ix[f"P_{fid}"]], PwlSpec(10, bounds.p_max[fid]))[0]
                   + pwl_eval(x[ix[f"Q_{fid}"]], PwlSpec(10, bounds.q_max[fid]))[0])
        assert pwl_sum >= state.v_sqr[f.to_bus] * state.i_sqr[fid] - 1e-12


def test_reconfiguration_fixes_buses_and_restoration_frees_them():
    net = fixture13(restoration=True)
    rec = build_model(net, RunConfig(mode=Mode.RECONFIGURATION), init_bounds(net))
    res = build_model(net, RunConfig(mode=Mode.RESTORATION), init_bounds(net))
    for b in net.buses:
        var = rec.variables[rec.index[f"v_{b.id}"]]
        assert (var.lb, var.ub) == (1.0, 1.0)
    assert res.variables[res.index["v_13"]].ub == 0.0
    assert res.variables[res.index["v_1"]].ub == 1.0
    assert rec.minimize and not res.minimize


def test_lp_dump_carries_tags_and_sections():
    net = two_bus()
    text = write_lp(build_model(net, RunConfig(segments=2), init_bounds(net)))
    assert text.startswith("\\")
    for section in ("Minimize", "Subject To", "Bounds", "Binaries", "End"):
        assert re.search(rf"^{section}", text, re.M), section
    assert "\\ eq26" in text and "\\ eq13" in text
    names = re.findall(r"^ (\S+):", text, re.M)
    assert len(names) == len(set(names))
