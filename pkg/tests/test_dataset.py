import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_restore.dataset import (
    AdjacencyGraph,
    DataError,
    OutageSeries,
    adjacency_to_csv,
    areal_test_graph,
    build_adjacency,
    connected_components,
    dataset_to_csv,
    default_scaling_policy,
    describe,
    descriptive_stats,
    event_time_histogram,
    lattice_adjacency,
    parse_adjacency,
    parse_dataset,
    parse_outage_series,
    restoration_interval,
    restoration_time_from_series,
    scale_covariates,
    unscale_covariates,
)

COVS = ["wind", "outage", "investor", "plants", "income", "nonwhite"]
HEADER = "unit_id,event_time_days,censored," + ",".join(COVS)


def _csv(*rows):
    return HEADER + "\n" + "\n".join(rows) + "\n"


# --------------------------------------------------------------------------- parsing


def test_parse_maps_fields():
    ds = parse_dataset(_csv("Broward,4,0,80,90,95,3,5.6,40"), COVS)
    r = ds.records[0]
    assert (r.unit_id, r.event_time, r.censored) == ("Broward", 4.0, False)
    assert r.covariates == (80.0, 90.0, 95.0, 3.0, 5.6, 40.0)


def test_parse_infers_schema_and_keeps_row_order():
    ds = parse_dataset(_csv("b,1,0,1,1,1,1,1,1", "a,2,1,1,1,1,1,1,1"))
    assert ds.covariate_names == tuple(COVS)
    assert ds.unit_ids == ["b", "a"]
    assert list(ds.censored) == [False, True]


@pytest.mark.parametrize("row,msg", [
    ("x,0,0,1,1,1,1,1,1", "row 2: non-positive event time"),
    ("x,-3,0,1,1,1,1,1,1", "row 2: non-positive event time"),
    ("x,1,0,1,abc,1,1,1,1", "row 2: non-numeric covariate"),
    ("x,1,0,1,,1,1,1,1", "row 2: missing value"),
    ("x,1,2,1,1,1,1,1,1", "row 2: censored must be 0 or 1"),
])
def test_parse_rejects_bad_rows(row, msg):
    with pytest.raises(DataError, match=msg):
        parse_dataset(_csv(row))


def test_parse_reports_duplicate_with_row_number():
    with pytest.raises(DataError, match="row 3: duplicate unit_id"):
        parse_dataset(_csv("a,1,0,1,1,1,1,1,1", "a,2,0,1,1,1,1,1,1"))


def test_parse_missing_column():
    with pytest.raises(DataError, match="missing column 'censored'"):
        parse_dataset("unit_id,event_time_days,wind\na,1,3\n")
    with pytest.raises(DataError, match="missing column 'gdp'"):
        parse_dataset(_csv("a,1,0,1,1,1,1,1,1"), ["gdp"])


def test_csv_round_trip():
    text = _csv("a,1.25,0,1,2,3,4,5,6", "b,3,1,6,5,4,3,2,1")
    ds = parse_dataset(text)
    again = parse_dataset(dataset_to_csv(ds))
    assert again.records == ds.records


# --------------------------------------------------------------------------- outage series


def _series(points):
    return OutageSeries("u", tuple((float(t), float(p)) for t, p in points))


def test_series_below_threshold_excluded():
    assert restoration_time_from_series(_series([(0, 0), (5, 15), (10, 3)])) is None


def test_rectangular_pulse_is_three_days():
    s = _series([(0, 0), (10, 100), (82, 0), (100, 0)])
    assert restoration_time_from_series(s) == pytest.approx(3.0)


def test_series_from_iso_csv():
    text = ("unit_id,timestamp_iso8601,pct_out\n"
            "A,2017-09-10T12:00:00Z,100\n"
            "A,2017-09-13T12:00:00Z,0\n"
            "A,2017-09-10T00:00:00Z,0\n")
    s = parse_outage_series(text)["A"]
    assert [p for _, p in s.samples] == [0.0, 100.0, 0.0]
    assert restoration_time_from_series(s) == pytest.approx(3.0)


def test_series_validation():
    with pytest.raises(DataError):
        _series([(0, 10), (0, 20)])
    with pytest.raises(DataError):
        _series([(0, 120)])
    with pytest.raises(DataError, match="row 3"):
        parse_outage_series("unit_id,timestamp_iso8601,pct_out\nA,2017-09-10T00:00:00Z,1\nA,nope,2\n")


def test_series_ending_above_threshold_is_censored():
    days, restored = restoration_interval(_series([(0, 50), (48, 60)]))
    assert days == pytest.approx(2.0) and restored is False


def _scan_oracle(ts, pct, thr):
    """Brute force: first index >= thr, then first index after which every later value is <= thr."""
    onset = None
    for k, p in enumerate(pct):
        if p >= thr:
            onset = k
            break
    if onset is None:
        return None
    for k in range(onset + 1, len(pct)):
        if all(p <= thr for p in pct[k:]):
            return (ts[k] - ts[onset]) / 24.0
    return (ts[-1] - ts[onset]) / 24.0


def test_two_pulses_against_scan_oracle():
    pts = [(0, 0), (6, 40), (12, 5), (30, 80), (60, 10), (72, 0)]
    s = _series(pts)
    expect = _scan_oracle([t for t, _ in pts], [p for _, p in pts], 20.0)
    assert restoration_time_from_series(s) == pytest.approx(expect)
    assert expect == pytest.approx(54 / 24)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=30),
       st.floats(1, 99))
def test_restoration_matches_scan_oracle(pct, thr):
    ts = [6.0 * k for k in range(len(pct))]
    s = _series(zip(ts, pct))
    got = restoration_time_from_series(s, thr)
    expect = _scan_oracle(ts, pct, thr)
    if expect is None:
        assert got is None
    else:
        assert got == pytest.approx(expect)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=20), st.integers(0, 18))
def test_redundant_samples_do_not_change_duration(pct, pos):
    ts = [10.0 * k for k in range(len(pct))]
    pos = pos % (len(pct) - 1)
    # repeat sample pos's value halfway to the next sample: crossings are unchanged
    ts2 = ts[: pos + 1] + [ts[pos] + 5.0] + ts[pos + 1:]
    pct2 = pct[: pos + 1] + [pct[pos]] + pct[pos + 1:]
    a = restoration_time_from_series(_series(zip(ts, pct)))
    b = restoration_time_from_series(_series(zip(ts2, pct2)))
    if a is None:
        assert b is None
    else:
        assert b == pytest.approx(a)


# --------------------------------------------------------------------------- scaling


def test_income_scaling():
    ds = parse_dataset(_csv("a,1,0,1,1,1,1,46242,1", "b,2,0,1,1,1,1,50000,1"))
    scaled, meta = scale_covariates(ds, default_scaling_policy(ds.covariate_names))
    assert scaled.column("income")[0] == pytest.approx(4.6242)
    assert meta.get("income").divisor == 10000.0
    assert meta.invert("income", 4.6242) == pytest.approx(46242.0)


def test_identity_policy_and_unknown_name():
    ds = parse_dataset(_csv("a,1,0,1,2,3,4,5,6"))
    same, _ = scale_covariates(ds, {"wind": (0.0, 1.0)})
    assert same.records == ds.records
    with pytest.raises(DataError, match="unknown covariate"):
        scale_covariates(ds, {"gdp": (0.0, 2.0)})
    with pytest.raises(DataError, match="zero divisor"):
        scale_covariates(ds, {"wind": (0.0, 0.0)})


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8), st.floats(-1e3, 1e3),
       st.floats(1e-3, 1e4))
def test_scale_round_trip(vals, offset, divisor):
    rows = [f"u{i},1,0,{v!r},1,1,1,1,1" for i, v in enumerate(vals)]
    ds = parse_dataset(_csv(*rows))
    scaled, _ = scale_covariates(ds, {"wind": (offset, divisor)})
    back = unscale_covariates(scaled)
    np.testing.assert_allclose(back.column("wind"), ds.column("wind"), rtol=1e-12, atol=1e-12 * 1e6)


# --------------------------------------------------------------------------- descriptive statistics


def test_descriptive_stats_constant_column():
    ds = parse_dataset(_csv("a,1,0,7,1,1,1,1,1", "b,2,0,7,2,1,1,1,1", "c,4,0,7,3,1,1,1,1"))
    st_ = descriptive_stats(ds)["wind"]
    assert st_ == {"mean": 7.0, "std": 0.0, "min": 7.0, "median": 7.0, "max": 7.0}


def test_median_even_count_midpoint():
    assert describe([1, 2, 3, 10])["median"] == 2.5


def test_descriptive_stats_needs_two_records():
    with pytest.raises(DataError):
        descriptive_stats(parse_dataset(_csv("a,1,0,1,1,1,1,1,1")))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e5, 1e5), min_size=2, max_size=50))
def test_mean_std_match_two_pass_oracle(xs):
    d = describe(xs)
    n = len(xs)
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1)
    assert d["mean"] == pytest.approx(mean, rel=1e-10, abs=1e-9)
    assert d["std"] == pytest.approx(math.sqrt(var), rel=1e-10, abs=1e-9)


def test_histogram_counts():
    ds = parse_dataset(_csv("a,1,0,1,1,1,1,1,1", "b,3,0,1,1,1,1,1,1", "c,1,0,1,1,1,1,1,1"))
    assert event_time_histogram(ds) == [(1.0, 2), (3.0, 1)]


# --------------------------------------------------------------------------- adjacency


def test_build_adjacency_degrees():
    g = build_adjacency(["A", "B", "C"], [("A", "B")])
    assert g.degrees == {"A": 1, "B": 1, "C": 0}


def test_self_loop_and_unknown_id():
    with pytest.raises(DataError, match="self-loop"):
        build_adjacency(["A"], [("A", "A")])
    with pytest.raises(DataError, match="unknown unit"):
        build_adjacency(["A"], [("A", "Z")])


def test_rook_lattice_2x2():
    g = lattice_adjacency(2, 2)
    assert len(g.edges) == 4
    assert set(g.degrees.values()) == {2}


def test_duplicates_and_reversed_pairs_deduplicated():
    g = build_adjacency(["A", "B"], [("A", "B"), ("B", "A"), ("A", "B")])
    assert len(g.edges) == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_edge_order_independence(m, seed):
    rnd = random.Random(seed)
    ids = [f"u{i}" for i in range(m)]
    pairs = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:] if rnd.random() < 0.4]
    shuffled = [(b, a) if rnd.random() < 0.5 else (a, b) for a, b in pairs]
    rnd.shuffle(shuffled)
    g1, g2 = build_adjacency(ids, pairs), build_adjacency(ids, shuffled)
    assert g1 == g2
    A = g1.adjacency_matrix()
    assert np.array_equal(A, A.T) and np.all(np.diag(A) == 0)
    assert list(A.sum(axis=1)) == [g1.degrees[u] for u in ids]


def test_components():
    assert connected_components(areal_test_graph())[0] == 1
    g = build_adjacency(["A", "B", "C"], [("A", "B")])
    c, labels = connected_components(g)
    assert c == 2 and labels == [0, 0, 1]
    empty = AdjacencyGraph(("a", "b", "c", "d"), frozenset())
    assert connected_components(empty)[0] == 4


def test_adjacency_csv_round_trip():
    g = areal_test_graph()
    again = parse_adjacency(adjacency_to_csv(g), g.unit_ids)
    assert again == g


def test_areal_test_graph_shape():
    g = areal_test_graph()
    assert g.m == 62
    assert min(g.degrees.values()) >= 1
