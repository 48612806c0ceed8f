import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajgam import (
    Dataset,
    DatasetError,
    SimConfig,
    combine_factors,
    gen_words,
    load_long_csv,
    make_factor,
    mark_series_starts,
    to_ordered_treatment,
    write_csv,
)
from trajgam.dataset import treatment_dummies

WORDS_HEAD = """traj,word,measurement.no,f2,duration
traj.1,A,0,1642.761,0.1378182
traj.1,A,1,1650.5,0.1378182
"""


def test_first_row_of_words_file(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text(WORDS_HEAD)
    schema = {"traj": "factor", "word": "factor", "measurement.no": "numeric",
              "f2": "numeric", "duration": "numeric"}
    d = load_long_csv(p, schema)
    assert d.n == 2
    assert d["traj"].labels()[0] == "traj.1"
    assert d["word"].labels()[0] == "A"
    assert d.numeric("measurement.no")[0] == 0
    assert d.numeric("f2")[0] == 1642.761
    assert d.numeric("duration")[0] == 0.1378182


def test_header_only_file_is_empty_dataset(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("a,b\n")
    d = load_long_csv(p, {"a": "numeric", "b": "factor"})
    assert d.n == 0


def test_glasgow_schema(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("measurement.no,duration,decade,stress,traj,speaker,f3\n"
                 "0,0.1,1,full,t1,s1,2500\n1,0.1,1,full,t1,s1,2510\n0,0.2,2,schwa,t2,s2,2400\n")
    d = load_long_csv(p, {"measurement.no": "numeric", "duration": "numeric", "decade": "numeric",
                          "stress": "factor", "traj": "factor", "speaker": "factor", "f3": "numeric"})
    assert d["stress"].is_factor and not d["decade"].is_factor
    assert d["stress"].levels == ("full", "schwa")


@pytest.mark.parametrize("text, fragment", [
    ("a,b\n1,2\n", "missing column"),
    ("a,a,c\n1,2,3\n", "duplicate header"),
    ("a,c\n1,2\nx,3\n", "row 3"),
])
def test_load_errors(tmp_path, text, fragment):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DatasetError, match=fragment):
        load_long_csv(p, {"a": "numeric", "c": "numeric"})


def test_missing_values_rejected_or_dropped(tmp_path):
    p = tmp_path / "na.csv"
    p.write_text("a,b\n1,x\nNA,y\n3,z\n")
    with pytest.raises(DatasetError, match="missing"):
        load_long_csv(p, {"a": "numeric", "b": "factor"})
    d = load_long_csv(p, {"a": "numeric", "b": "factor"}, drop_na=True)
    assert d.n == 2
    assert list(d.numeric("a")) == [1, 3]


def test_scientific_notation_and_quotes(tmp_path):
    p = tmp_path / "q.csv"
    p.write_text('a,b\n1e-3,"x,y"\n')
    d = load_long_csv(p, {"a": "numeric", "b": "factor"})
    assert d.numeric("a")[0] == 0.001
    assert d["b"].labels()[0] == "x,y"


def test_csv_round_trip(tmp_path):
    d = gen_words(SimConfig(n_traj=3, seed=9))
    p = tmp_path / "rt.csv"
    write_csv(d, p)
    schema = {c: ("factor" if d[c].is_factor else "numeric") for c in d.names}
    back = load_long_csv(p, schema)
    for c in d.names:
        if d[c].is_factor:
            assert list(back[c].labels()) == list(d[c].labels())
        else:
            np.testing.assert_allclose(back.numeric(c), d.numeric(c), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_numeric_round_trip_is_exact(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("rt") / "v.csv"
    write_csv(Dataset.from_dict({"v": values}), p)
    assert list(load_long_csv(p, {"v": "numeric"}).numeric("v")) == values


def test_series_starts_words_layout():
    d = gen_words(SimConfig())
    s = mark_series_starts(d, "traj", "measurement.no")
    assert s.start_flags.sum() == 50
    assert np.array_equal(s.start_flags, d.numeric("measurement.no") == 0)
    assert set(s.lengths) == {11}


def test_series_singleton():
    d = Dataset.from_dict({"s": ["a"], "t": [0.0]})
    assert list(mark_series_starts(d, "s", "t").start_flags) == [True]


def test_series_ties_rejected():
    d = Dataset.from_dict({"s": ["a"] * 4, "t": [0, 1, 1, 2]})
    with pytest.raises(DatasetError, match="row 2"):
        mark_series_starts(d, "s", "t")


def test_series_not_contiguous():
    d = Dataset.from_dict({"s": ["a", "b", "a"], "t": [0, 0, 1]})
    with pytest.raises(DatasetError, match="'a'"):
        mark_series_starts(d, "s", "t")


def test_series_independent_of_level_names():
    d1 = Dataset.from_dict({"s": ["a", "a", "b", "b", "c"], "t": [0, 1, 0, 1, 0]})
    d2 = Dataset.from_dict({"s": ["zz", "zz", "q", "q", "m"], "t": [0, 1, 0, 1, 0]})
    f1 = mark_series_starts(d1, "s", "t").start_flags
    assert np.array_equal(f1, mark_series_starts(d2, "s", "t").start_flags)
    assert np.array_equal(f1, mark_series_starts(d1, "s", "t").start_flags)


def test_ordered_treatment_dummy():
    d = Dataset.from_dict({"word": ["B", "A", "B"]})
    o = to_ordered_treatment(d, "word", "A", name="word.ord")
    c = o["word.ord"]
    assert c.ordered and c.reference == "A"
    labels, mat = treatment_dummies(c)
    assert labels == ["word.ordB"]
    assert list(mat[:, 0]) == [1, 0, 1]


def test_ordered_stress_label_and_single_level():
    d = Dataset.from_dict({"stress": ["full", "schwa"]})
    labels, _ = treatment_dummies(to_ordered_treatment(d, "stress", "full")["stress"])
    assert labels == ["stressschwa"]
    one = to_ordered_treatment(Dataset.from_dict({"w": ["A", "A"]}), "w", "A")
    assert treatment_dummies(one["w"])[1].shape == (2, 0)


def test_ordered_unknown_level():
    with pytest.raises(DatasetError):
        to_ordered_treatment(Dataset.from_dict({"w": ["A"]}), "w", "C")


def test_combine_all_pairs():
    sp = [f"s{i}" for i in range(12) for _ in range(2)]
    stress = ["full", "schwa"] * 12
    d = combine_factors(Dataset.from_dict({"speaker": sp, "stress": stress}), "speaker", "stress", "ss")
    assert len(d["ss"].levels) == 24


def test_combine_with_single_level_and_unobserved_pairs():
    d = Dataset.from_dict({"a": ["x", "y", "x", "z"], "b": ["u", "u", "u", "u"]})
    c = combine_factors(d, "a", "b", "ab")
    assert len(c["ab"].levels) == len(d["a"].levels)
    d2 = Dataset.from_dict({"a": ["x", "y", "x"], "b": ["u", "v", "u"]})
    levels = combine_factors(d2, "a", "b", "ab")["ab"].levels
    assert set(levels) == {f"{a}.{b}" for a, b in zip(["x", "y", "x"], ["u", "v", "u"])}
    with pytest.raises(DatasetError, match="exists"):
        combine_factors(d2, "a", "b", "a")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("xyz")), min_size=1, max_size=40))
def test_combine_level_count_matches_distinct_pairs(pairs):
    d = Dataset.from_dict({"a": [p[0] for p in pairs], "b": [p[1] for p in pairs]})
    assert len(combine_factors(d, "a", "b", "ab")["ab"].levels) == len(set(pairs))


def test_columns_immutable():
    c = make_factor("f", ["a", "b"])
    with pytest.raises(ValueError):
        c.data[0] = 1
