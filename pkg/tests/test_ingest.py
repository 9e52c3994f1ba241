import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import month_keys, series_of
from foodwarn.errors import BadDate, BadNumber, DuplicateKey, MissingColumn, NoOverlap, UnknownSeverity
from foodwarn.ingest import (
    FeatureTable,
    ObservationKey,
    RawSeries,
    SourceSchema,
    WarningLabel,
    join_complete,
    load_source,
    load_warnings,
    parse_date,
    write_source,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_source_single_row(tmp_path):
    p = _write(tmp_path / "a.csv", "country,commodity,date,value\nNGA,MAIZE,2020-03,152.4\n")
    rs = load_source(p, SourceSchema("local_price", "value"))
    assert rs.points == {ObservationKey("NGA", "MAIZE", 2020, 3): 152.4}


def test_header_only_is_empty(tmp_path):
    p = _write(tmp_path / "a.csv", "country,commodity,date,value\n")
    assert len(load_source(p, SourceSchema("x", "value"))) == 0


@pytest.mark.parametrize("date", ["2020-13", "2020-00", "20-03", "March 2020"])
def test_bad_dates(tmp_path, date):
    p = _write(tmp_path / "a.csv", f"country,commodity,date,value\nNGA,MAIZE,{date},1\n")
    with pytest.raises(BadDate):
        load_source(p, SourceSchema("x", "value"))


def test_date_formats():
    assert parse_date("2020-03", "YYYY-MM") == (2020, 3)
    assert parse_date("2020-03-17", "YYYY-MM-DD") == (2020, 3)
    assert parse_date("03/2020", "MM/YYYY") == (2020, 3)


def test_custom_columns_and_case(tmp_path):
    p = _write(tmp_path / "a.csv", "iso,crop,period,px\nnga,maize,07/2019,3.5\n")
    schema = SourceSchema("p", "px", country_column="iso", commodity_column="crop", date_column="period", date_format="MM/YYYY")
    assert load_source(p, schema).points == {ObservationKey("NGA", "MAIZE", 2019, 7): 3.5}


def test_missing_column(tmp_path):
    p = _write(tmp_path / "a.csv", "country,commodity,value\nNGA,MAIZE,1\n")
    with pytest.raises(MissingColumn):
        load_source(p, SourceSchema("x", "value"))


@pytest.mark.parametrize("cell", ["", "abc", "nan", "inf"])
def test_bad_numbers(tmp_path, cell):
    p = _write(tmp_path / "a.csv", f"country,commodity,date,value\nNGA,MAIZE,2020-01,{cell}\n")
    with pytest.raises(BadNumber):
        load_source(p, SourceSchema("x", "value"))


def test_duplicate_key(tmp_path):
    p = _write(tmp_path / "a.csv", "country,commodity,date,value\nNGA,MAIZE,2020-01,1\nnga,MAIZE,2020-01,2\n")
    with pytest.raises(DuplicateKey):
        load_source(p, SourceSchema("x", "value"))


def test_annual_source_fills_year(tmp_path):
    p = _write(tmp_path / "a.csv", "country,commodity,date,value\nNGA,MAIZE,2020-01,0.4\n")
    rs = load_source(p, SourceSchema("proteus_index", "value", annual=True))
    assert sorted(rs.points) == month_keys("NGA", "MAIZE", 2020, 1, 12)
    assert set(rs.points.values()) == {0.4}


def test_annual_duplicate_year(tmp_path):
    p = _write(tmp_path / "a.csv", "country,commodity,date,value\nNGA,MAIZE,2020-01,1\nNGA,MAIZE,2020-06,2\n")
    with pytest.raises(DuplicateKey):
        load_source(p, SourceSchema("x", "value", annual=True))


def test_join_small_example():
    k1, k2, k3, k4 = month_keys("NGA", "MAIZE", 2020, 1, 4)
    a = series_of("a", [k1, k2, k3], [1, 2, 3])
    b = series_of("b", [k2, k3, k4], [20, 30, 40])
    table = join_complete([a, b], ["a", "b"])
    assert list(table.rows) == [k2, k3]
    assert table.rows[k3].tolist() == [3.0, 30.0]


def test_join_with_empty_source():
    keys = month_keys("NGA", "MAIZE", 2020, 1, 3)
    with pytest.raises(NoOverlap):
        join_complete([series_of("a", keys, [1, 2, 3]), RawSeries("b")], ["a", "b"])


def test_join_disjoint_message_lists_counts():
    a = series_of("a", month_keys("NGA", "MAIZE", 2020, 1, 3), [1, 2, 3])
    b = series_of("b", month_keys("KEN", "MAIZE", 2020, 1, 2), [1, 2])
    with pytest.raises(NoOverlap, match="a=3, b=2"):
        join_complete([a, b], ["a", "b"])


def test_seven_sources_with_deleted_months():
    rng = np.random.default_rng(7)
    keys = month_keys("NGA", "MAIZE", 2015, 1, 120)
    sources, key_sets = [], []
    for j in range(7):
        drop = set(rng.choice(120, size=3, replace=False).tolist())
        kept = [k for i, k in enumerate(keys) if i not in drop]
        key_sets.append(set(kept))
        sources.append(series_of(f"f{j}", kept, rng.normal(size=len(kept))))
    expected = [k for k in keys if all(k in s for s in key_sets)]
    table = join_complete(sources, [s.source_name for s in sources])
    assert list(table.rows) == expected
    for k in expected:
        assert table.rows[k].tolist() == [s.points[k] for s in sources]


_country = st.sampled_from(["NGA", "KEN", "ETH"])
_month = st.integers(0, 47)


@settings(max_examples=120, deadline=None)
@given(st.lists(st.sets(st.tuples(_country, _month), max_size=60), min_size=1, max_size=5))
def test_join_equals_brute_force_intersection(key_sets):
    sources = []
    for j, ks in enumerate(key_sets):
        points = {ObservationKey(c, "MAIZE", 2010 + o // 12, o % 12 + 1): float(j * 1000 + o) for c, o in ks}
        sources.append(RawSeries(f"s{j}", points))
    brute = set(sources[0].points)
    for s in sources[1:]:
        brute = {k for k in brute if k in s.points}
    names = [s.source_name for s in sources]
    if not brute:
        with pytest.raises(NoOverlap):
            join_complete(sources, names)
        return
    table = join_complete(sources, names)
    assert set(table.rows) == brute
    for row in table.rows.values():
        assert row.shape == (len(sources),) and np.all(np.isfinite(row))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.tuples(_country, _month), st.floats(-1e9, 1e9, allow_nan=False), max_size=40))
def test_source_csv_round_trip(tmp_path_factory, points):
    rs = RawSeries("x", {ObservationKey(c, "RICE", 2000 + o // 12, o % 12 + 1): v for (c, o), v in points.items()})
    path = tmp_path_factory.mktemp("rt") / "x.csv"
    write_source(rs, path)
    assert load_source(path, SourceSchema("x", "value")).points == rs.points


def test_feature_table_csv_round_trip(tmp_path, small_table):
    table, _ = small_table
    table.to_csv(tmp_path / "t.csv")
    back = FeatureTable.from_csv(tmp_path / "t.csv")
    assert back.feature_names == table.feature_names
    assert back.rows.keys() == table.rows.keys()
    for k in table.rows:
        assert np.array_equal(back.rows[k], table.rows[k])


def test_warning_labels(tmp_path):
    p = _write(tmp_path / "w.csv", "country,commodity,month,severity\nNGA,MAIZE,2021-06,high\nNGA,MAIZE,2021-07,Moderate\n")
    labels = load_warnings(p)
    assert labels.get(ObservationKey("NGA", "MAIZE", 2021, 6)) is WarningLabel.HIGH
    assert labels.get(ObservationKey("NGA", "MAIZE", 2021, 7)) is WarningLabel.MODERATE
    # absent keys default to no warning
    assert labels.get(ObservationKey("NGA", "MAIZE", 2021, 8)) is WarningLabel.NONE


def test_unknown_severity(tmp_path):
    p = _write(tmp_path / "w.csv", "country,commodity,month,severity\nNGA,MAIZE,2021-06,critical\n")
    with pytest.raises(UnknownSeverity):
        load_warnings(p)


def test_warning_csv_round_trip(tmp_path, small_table):
    _, labels = small_table
    labels.to_csv(tmp_path / "w.csv")
    assert load_warnings(tmp_path / "w.csv").labels == labels.labels


def test_key_shift_and_ordinal():
    k = ObservationKey("nga", "maize", 2020, 11)
    assert k.shift(3) == ObservationKey("NGA", "MAIZE", 2021, 2)
    assert k.shift(-11) == ObservationKey("NGA", "MAIZE", 2019, 12)
    assert k.shift(5).ordinal - k.ordinal == 5
