import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlsf.stl import (
    And,
    EmptyWindowError,
    Eventually,
    Globally,
    IntervalError,
    Not,
    Or,
    Pred,
    Predicate,
    RegionSpec,
    Signal,
    SignalError,
    StlError,
    StlSyntaxError,
    UnknownPredicateError,
    Until,
    load_predicate_table,
    parse_stl,
    region_to_formula,
    sat_bool,
    to_text,
    top_clauses,
    window_offsets,
)

A = Predicate("A", "s", "band", 0.4, 0.6)
B = Predicate("B", "s", "band", 0.15, 0.35)
TABLE = {"A": A, "B": B}


def const(v, n=11, dt=1.0):
    return Signal(dt, {"s": np.full(n, v)})


# ----------------------------------------------------------- predicates


@pytest.mark.parametrize(
    "pred, x, expected",
    [
        (Predicate("p", "s", "lower", lb=1.0), 3.0, 2.0),
        (Predicate("p", "s", "upper", ub=1.0), 3.0, -2.0),
        (Predicate("p", "s", "band", 0.4, 0.6), 0.5, 0.1),
        (Predicate("p", "s", "band", 0.0, 1.0), 0.5, 0.5),
        (Predicate("p", "f", "threshold", c=2.0), 1.9, 0.1),
        (Predicate("p", "f", "threshold", c=2.0), -2.5, -0.5),
    ],
)
def test_margins(pred, x, expected):
    assert pred.margin(x) == pytest.approx(expected, abs=1e-12)


def test_band_needs_ordered_bounds():
    with pytest.raises(StlError):
        Predicate("p", "s", "band", 0.6, 0.6)
    with pytest.raises(StlError):
        Predicate("p", "s", "cubic")


def test_predicate_dict_round_trip():
    for p in (A, Predicate("f", "f", "threshold", c=2.0), Predicate("u", "y", "upper", ub=0.3)):
        assert Predicate.from_dict(p.name, p.to_dict()) == p


# ---------------------------------------------------------------- parser


def test_parse_two_clause_example():
    phi = parse_stl("F[2,4](A) and G[2,8](not B)", TABLE)
    assert phi == And((Eventually((2.0, 4.0), Pred(A)), Globally((2.0, 8.0), Not(Pred(B)))))


def test_parse_single_atom():
    assert parse_stl("A", TABLE) == Pred(A)


def test_precedence_and_nary_chains():
    phi = parse_stl("A or B and not A or B", TABLE)
    assert phi == Or((Pred(A), And((Pred(B), Not(Pred(A)))), Pred(B)))
    assert parse_stl("A and B and A", TABLE) == And((Pred(A), Pred(B), Pred(A)))


def test_until_and_unbounded():
    phi = parse_stl("U[0,3](A, F(B))", TABLE)
    assert phi == Until((0.0, 3.0), Pred(A), Eventually(None, Pred(B)))


@pytest.mark.parametrize("text", ["F[4,2](A)", "G[-1,2](A)", "U[3,1](A, B)"])
def test_bad_intervals(text):
    with pytest.raises(IntervalError):
        parse_stl(text, TABLE)


def test_until_requires_interval():
    with pytest.raises(StlSyntaxError):
        parse_stl("U(A, B)", TABLE)


def test_syntax_error_position():
    with pytest.raises(StlSyntaxError) as info:
        parse_stl("F[2,4](A)\n  and G[2,8](not B", TABLE)
    assert info.value.line == 2
    assert info.value.column == 19
    with pytest.raises(StlSyntaxError) as info:
        parse_stl("A $ B", TABLE)
    assert (info.value.line, info.value.column) == (1, 3)


def test_unknown_predicate():
    with pytest.raises(UnknownPredicateError, match="C"):
        parse_stl("A and C", TABLE)


def test_region_macro_and_axis_names():
    r = RegionSpec("L1", (0.4, 0.6), (0.4, 0.6), (0.4, 0.6))
    table = load_predicate_table({"L1": {"region": "L1"}}, [r])
    phi = parse_stl("F(L1)", table)
    assert phi == Eventually(None, region_to_formula(r))
    assert to_text(phi) == "F(L1_x and L1_y and L1_z)"
    assert parse_stl(to_text(phi), table) == phi


def test_region_formula_half_width():
    r = RegionSpec("R", (0.4, 0.6), (0.4, 0.6), (0.4, 0.6))
    phi = region_to_formula(r)
    assert isinstance(phi, And) and len(phi.children) == 3
    for c, axis in zip(phi.children, "xyz"):
        assert c.pred.kind == "band" and c.pred.channel == axis
        assert c.pred.margin(0.5) == pytest.approx(0.1)
    with pytest.raises(StlError):
        RegionSpec("bad", (0.6, 0.4), (0, 1), (0, 1))
    with pytest.raises(StlError):
        region_to_formula(r, ("x", "y"))


def test_region_center_margin():
    r = RegionSpec("R", (0.0, 1.0), (0.0, 1.0), (0.0, 1.0))
    assert region_to_formula(r).children[0].pred.margin(0.5) == 0.5


# ---------------------------------------------------------------- printer

leaf = st.sampled_from([Pred(A), Pred(B)])
bounds = st.tuples(st.integers(0, 20), st.integers(0, 20)).map(lambda ab: (min(ab) / 4, max(ab) / 4))
opt_bounds = st.one_of(st.none(), bounds)


def _extend(children):
    return st.one_of(
        children.map(Not),
        st.lists(children, min_size=2, max_size=3).map(lambda cs: And(tuple(cs))),
        st.lists(children, min_size=2, max_size=3).map(lambda cs: Or(tuple(cs))),
        st.tuples(opt_bounds, children).map(lambda t: Globally(*t)),
        st.tuples(opt_bounds, children).map(lambda t: Eventually(*t)),
        st.tuples(bounds, children, children).map(lambda t: Until(*t)),
    )


formulas = st.recursive(leaf, _extend, max_leaves=8)


@given(formulas)
@settings(max_examples=300, deadline=None)
def test_print_parse_round_trip(phi):
    assert parse_stl(to_text(phi), TABLE) == phi


def test_printer_examples():
    phi = parse_stl("F[2,4](A) and G[2,8](not B)", TABLE)
    assert to_text(phi) == "F[2,4](A) and G[2,8](not B)"
    assert to_text(Not(And((Pred(A), Pred(B))))) == "not (A and B)"
    assert to_text(Until((0.5, 1.25), Pred(A), Pred(B))) == "U[0.5,1.25](A, B)"
    assert [to_text(c) for c in top_clauses(phi)] == ["F[2,4](A)", "G[2,8](not B)"]
    assert top_clauses(Pred(A)) == [Pred(A)]


# ----------------------------------------------------------------- signal


def test_signal_validation():
    with pytest.raises(SignalError):
        Signal(0.0, {"s": [1.0]})
    with pytest.raises(SignalError):
        Signal(0.1, {"s": [1.0, 2.0], "y": [1.0]})
    with pytest.raises(SignalError):
        Signal(0.1, {"s": [1.0, math.nan]})
    with pytest.raises(SignalError):
        Signal(0.1, {"s": []})
    s = Signal(0.1, {"s": [1.0, 2.0, 3.0]})
    assert s.k == 2 and s.horizon == pytest.approx(0.2)
    assert s.index_of(0.2) == 2
    with pytest.raises(SignalError):
        s.index_of(0.15)
    with pytest.raises(SignalError):
        s.index_of(0.3)
    with pytest.raises(SignalError):
        s["missing"]


def test_signal_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    s = Signal(0.05, {"x": rng.normal(size=40), "f": rng.uniform(size=40)})
    s.to_csv(tmp_path / "s.csv")
    back = Signal.from_csv(tmp_path / "s.csv")
    assert back.dt == pytest.approx(0.05, abs=1e-12)
    for ch in ("x", "f"):
        assert np.array_equal(back[ch], s[ch])


def test_signal_csv_errors(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(SignalError, match="empty"):
        Signal.from_csv(p)
    p.write_text("t,s\n0,1\n0.1,2\n0.3,3\n")
    with pytest.raises(SignalError, match="uniform"):
        Signal.from_csv(p)
    p.write_text("x,s\n0,1\n")
    with pytest.raises(SignalError):
        Signal.from_csv(p)


# ---------------------------------------------------- discretisation + sat


def test_window_offsets():
    assert window_offsets((2, 4), 0.1, 100) == (20, 40)
    assert window_offsets((0.25, 0.35), 0.1, 100) == (3, 3)
    assert window_offsets(None, 0.1, 85) == (0, 85)
    assert window_offsets((0.3, 0.3), 0.1, 100) == (3, 3)


def test_sat_constant_signals():
    T = 10.0
    assert sat_bool(Globally((0, T), Pred(A)), const(0.5))
    assert not sat_bool(Eventually((0, T), Pred(A)), const(0.7))


def test_window_past_horizon_is_clamped_or_error():
    s = const(0.5, n=5)
    assert sat_bool(Globally((2, 100), Pred(A)), s)
    with pytest.raises(EmptyWindowError):
        sat_bool(Globally((5, 8), Pred(A)), s)


def test_until_boolean():
    a = Predicate("a", "s", "lower", lb=0.0)
    b = Predicate("b", "s", "lower", lb=5.0)
    s = Signal(1.0, {"s": [1, 1, 1, 6, -1, -1]})
    assert sat_bool(Until((0, 4), Pred(a), Pred(b)), s)
    assert not sat_bool(Until((0, 2), Pred(a), Pred(b)), s)
    s2 = Signal(1.0, {"s": [1, -1, 1, 6, 1, 1]})
    assert not sat_bool(Until((0, 4), Pred(a), Pred(b)), s2)


def _random_case(rng, depth=2):
    ps = [Predicate(f"p{i}", "s", "lower", lb=float(rng.uniform(-1, 1))) for i in range(2)]

    def gen(d):
        if d == 0 or rng.random() < 0.3:
            return Pred(ps[rng.integers(2)])
        k = rng.integers(5)
        if k == 0:
            return Not(gen(d - 1))
        if k in (1, 2):
            return (And if k == 1 else Or)((gen(d - 1), gen(d - 1)))
        a = int(rng.integers(0, 4))
        iv = (a, a + int(rng.integers(0, 4)))
        return (Globally if k == 3 else Eventually)(iv, gen(d - 1))

    return gen(depth), Signal(1.0, {"s": rng.uniform(-1, 1, 30)})


def test_de_morgan_boolean():
    rng = np.random.default_rng(11)
    for _ in range(200):
        (a, s), (b, _) = _random_case(rng), _random_case(rng)
        lhs = sat_bool(Not(And((a, b))), s)
        rhs = sat_bool(Or((Not(a), Not(b))), s)
        assert lhs == rhs


def test_globally_monotone_in_interval():
    rng = np.random.default_rng(12)
    checked = 0
    for _ in range(300):
        phi, s = _random_case(rng, depth=1)
        a, b = sorted(rng.integers(0, 10, 2))
        if not sat_bool(Globally((a, b), phi), s):
            continue
        a2 = int(rng.integers(a, b + 1))
        b2 = int(rng.integers(a2, b + 1))
        assert sat_bool(Globally((a2, b2), phi), s)
        checked += 1
    assert checked > 20
