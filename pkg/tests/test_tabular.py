import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fish_path, read_fish
from hierform.tabular import (
    FACTOR,
    INTEGER,
    NUMERIC,
    DataError,
    Dataset,
    column_summary,
    factor,
    from_columns,
    numeric,
    read_csv,
    sim_multi_mem,
    simulate_multi_membership,
    write_csv,
)


def test_header_only_file_gives_empty_typed_dataset():
    d = read_csv(b"a,b\n")
    assert d.n_rows == 0
    assert d.names == ["a", "b"]
    assert all(d[n].kind == NUMERIC for n in d.names)


def test_integer_inference():
    d = read_csv(b"v\n1\n2\n2\n")
    assert d["v"].kind == INTEGER
    assert list(d["v"].values) == [1, 2, 2]


def test_mixed_column_becomes_factor_in_first_appearance_order():
    d = read_csv(b"f,x\nno,1.5\nyes,2\nno,3\n")
    assert d["f"].kind == FACTOR
    assert d["f"].levels == ("no", "yes")
    assert d["x"].kind == NUMERIC


def test_schema_forces_kind():
    d = read_csv(b"g,y\n1,0.5\n2,1.5\n", schema={"g": FACTOR})
    assert d["g"].kind == FACTOR and d["g"].levels == ("1", "2")


@pytest.mark.parametrize(
    "text, msg",
    [
        (b"a,b\n1\n", "expected 2 fields"),
        (b"a,a\n1,2\n", "duplicate"),
        (b"a\n1\nNA\n", "missing"),
        (b"a\n1\n\n2\n", "expected 1 fields"),
        (b"a\n1.5\ninf\n", "non-finite"),
        (b"", "empty"),
    ],
)
def test_malformed_input(text, msg):
    with pytest.raises(DataError, match=msg):
        read_csv(text)


def test_constant_column_summary():
    d = from_columns({"c": [5, 5, 5]})
    s = column_summary(d, "c")
    assert (s.mean, s.min, s.max) == (5, 5, 5)


def test_factor_reference_level_is_first_appearance():
    d = from_columns({"f": ["no", "yes", "no"]})
    s = column_summary(d, "f")
    assert s.reference_level == "no"
    assert s.modal_level == "no"


def test_write_read_round_trip_exact():
    rng = np.random.default_rng(1)
    d = from_columns({"x": rng.normal(size=20) * 1e5, "k": list(range(20)), "f": list("ab" * 10)})
    back = read_csv(io.BytesIO(write_csv(d).encode()))
    assert back.equals(d)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
def test_numeric_round_trip_property(vals):
    d = Dataset({"x": numeric(vals)})
    back = read_csv(write_csv(d).encode(), schema={"x": NUMERIC})
    assert np.array_equal(back["x"].values, d["x"].values)


def test_factor_rejects_undeclared_level():
    with pytest.raises(DataError):
        factor(["a", "c"], levels=["a", "b"])


def test_dataset_length_mismatch():
    with pytest.raises(DataError):
        Dataset({"a": numeric([1, 2]), "b": numeric([1])})


class TestMultiMembership:
    def test_changer_count(self):
        d = sim_multi_mem(nschools=10, nstudents=1000, change=0.1, seed=3)
        s1, s2 = d["s1"].values, d["s2"].values
        assert int(np.sum(s1 != s2)) == 100

    def test_no_change(self):
        d = sim_multi_mem(change=0, seed=3)
        assert np.array_equal(d["s1"].values, d["s2"].values)

    def test_degenerate_truth(self):
        d = sim_multi_mem(truth={"intercept": 7.0, "sd_school": 0.0, "sigma": 0.0}, seed=1)
        assert np.all(d["y"].as_float() == 7.0)

    def test_bit_identical_with_seed(self):
        a = write_csv(sim_multi_mem(seed=11))
        b = write_csv(sim_multi_mem(seed=11))
        assert a == b
        assert a != write_csv(sim_multi_mem(seed=12))

    def test_floor_of_change_fraction(self):
        d = sim_multi_mem(nstudents=333, change=0.25, seed=0)
        assert int(np.sum(d["s1"].values != d["s2"].values)) == 83

    def test_latent_reconstruction(self):
        sim = simulate_multi_membership(seed=5)
        d = sim.data
        u = sim.school_effects
        s1, s2 = d["s1"].values, d["s2"].values
        w1, w2 = d["w1"].as_float(), d["w2"].as_float()
        y = sim.truth.intercept + w1 * u[s1] + w2 * u[s2] + sim.noise
        assert np.allclose(y, d["y"].as_float(), rtol=0, atol=1e-12)
        same = s1 == s2
        assert np.allclose((w1 * u[s1] + w2 * u[s2])[same], u[s1][same], atol=1e-12)

    @pytest.mark.parametrize("kw", [{"nschools": 1}, {"nstudents": 0}, {"change": 1.5}])
    def test_invalid_arguments(self, kw):
        with pytest.raises(DataError):
            sim_multi_mem(**kw)


def test_fish_first_row_and_mean():
    path = fish_path()
    if path is None:
        pytest.skip("fish data not available locally (set HIERFORM_FISH_CSV)")
    d = read_fish(path)
    assert d["count"].values[0] == 0
    assert d["camper"].labels[0] == "no"
    assert d["persons"].values[0] == 1 and d["child"].values[0] == 0
    # independent single-pass mean over the raw text
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        j = header.index("persons")
        total = n = 0
        for line in fh:
            if line.strip():
                total += float(line.split(",")[j])
                n += 1
    assert column_summary(d, "persons").mean == pytest.approx(total / n, rel=1e-12)
