import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metakit.errors import ParseError, SchemaError
from metakit.ingest import (Dataset, apply_subset, complete_cases, load_csv, read_csv_text, transform_column,
                            write_csv)


def test_type_inference_and_missing_tokens():
    d = read_csv_text("a,b,c\n1,x,NA\n2.5,y,\n,NaN,3\n")
    assert d.types == {"a": "real", "b": "categorical", "c": "real"}
    assert np.isnan(d.real("a")[2]) and np.isnan(d.real("c")[0])
    assert d["b"][2] is None
    assert d.levels["b"] == ("x", "y")


def test_type_hints_override():
    d = read_csv_text("study,y\n1,0.1\n2,0.2\n", {"study": "categorical"})
    assert d.types["study"] == "categorical" and d.levels["study"] == ("1", "2")


def test_ragged_row_is_parse_error_with_line():
    with pytest.raises(ParseError) as e:
        read_csv_text("a,b\n1,2\n3\n")
    assert e.value.line == 3


def test_empty_and_duplicate_header():
    with pytest.raises(ParseError):
        read_csv_text("")
    with pytest.raises(SchemaError):
        read_csv_text("a,a\n1,2\n")


def test_missing_file_is_schema_error(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(tmp_path / "none.csv")


def test_bad_utf8(tmp_path):
    p = tmp_path / "x.csv"
    p.write_bytes(b"a\n\xff\n")
    with pytest.raises(ParseError):
        load_csv(p)


def test_subset_keeps_row_ids():
    d = read_csv_text("g,y\na,1\nb,2\na,3\n,4\n")
    s = apply_subset(d, "g", ["a"])
    assert list(s.row_ids) == [0, 2]
    assert list(s.real("y")) == [1.0, 3.0]


def test_complete_cases_blames_first_missing():
    d = read_csv_text("y,v,m\n1,,\n2,1,\n3,1,1\n")
    r = complete_cases(d, ["y", "v", "m"])
    assert r.kept_row_ids == [2]
    assert r.n_omitted == 2 and r.omitted_reasons == {0: "v", 1: "m"}


def test_transform_records_violations():
    d = read_csv_text("x\n4\n-1\n\n")
    t = transform_column(d, "x", "sqrt", "rx")
    assert t.real("rx")[0] == 2.0 and np.isnan(t.real("rx")[1])
    assert t.violations["rx"] == 1
    with pytest.raises(SchemaError):
        transform_column(d, "x", "cube", "cx")


def test_unknown_column():
    d = read_csv_text("x\n1\n")
    with pytest.raises(SchemaError):
        d.real("nope")


cells = st.one_of(st.floats(-1e6, 1e6, allow_nan=False), st.just(float("nan")))


@given(st.lists(st.tuples(cells, st.sampled_from(["a", "b", "c", None])), min_size=1, max_size=30))
def test_csv_round_trip(tmp_path_factory, rows):
    x = [r[0] for r in rows]
    g = [r[1] for r in rows]
    d = Dataset.from_columns({"x": x, "g": g}, {"x": "real", "g": "categorical"})
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(d, p)
    e = load_csv(p, {"x": "real", "g": "categorical"})
    np.testing.assert_array_equal(e.real("x"), d.real("x"))
    assert list(e["g"]) == list(d["g"])
