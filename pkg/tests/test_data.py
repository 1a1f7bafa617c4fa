import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccmix.data import (DataError, Dataset, contingency_table, cramers_v, cramers_v_table,
                        load_csv, pairwise_v_matrix, write_csv)
from ccmix.datasets import dentist_path


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_binary_column_coded_lexicographically(tmp_path):
    data = load_csv(_write(tmp_path, "a\nb\na\nb\n"), header=False)
    assert data.n == 4 and data.d == 1
    assert data.modality_counts == (2,)
    assert data.codes[:, 0].tolist() == [1, 2, 1, 2]


def test_integer_labels_sort_numerically(tmp_path):
    text = "x\n" + "\n".join(str(v) for v in [10, 9, 2, 10, 9]) + "\n"
    data = load_csv(_write(tmp_path, text))
    assert data.modality_labels[0] == ("2", "9", "10")
    assert data.codes[:, 0].tolist() == [3, 2, 1, 3, 2]


def test_constant_column_is_degenerate(tmp_path):
    with pytest.raises(DataError, match="degenerate variable"):
        load_csv(_write(tmp_path, "a,b\nx,1\nx,2\n"))


def test_constant_column_allowed_with_schema(tmp_path):
    schema = [{"name": "a", "modalities": ["x", "y"]}, {"name": "b", "modalities": ["1", "2"]}]
    data = load_csv(_write(tmp_path, "a,b\nx,1\nx,2\n"), schema=schema)
    assert data.modality_counts == (2, 2)
    assert data.codes[:, 0].tolist() == [1, 1]


def test_schema_from_json_file(tmp_path):
    schema = [{"name": "a", "modalities": ["lo", "mid", "hi"]}]
    sp = tmp_path / "schema.json"
    sp.write_text(json.dumps(schema))
    data = load_csv(_write(tmp_path, "a\nhi\nlo\n"), schema=sp)
    assert data.codes[:, 0].tolist() == [3, 1]


def test_schema_smaller_than_observed(tmp_path):
    schema = [{"name": "a", "modalities": ["x", "y"]}]
    with pytest.raises(DataError, match="declared 2 modalities"):
        load_csv(_write(tmp_path, "a\nx\ny\nz\n"), schema=schema)


def test_missing_file_ragged_rows_and_blanks(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_csv(tmp_path / "nope.csv")
    with pytest.raises(DataError, match="ragged"):
        load_csv(_write(tmp_path, "a,b\n1,2\n1\n"), header=False)
    with pytest.raises(DataError, match="missing value"):
        load_csv(_write(tmp_path, "a,b\n1,2\n1,\n"))


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.array([[0, 1]]), (2, 2))
    with pytest.raises(DataError):
        Dataset(np.array([[1, 3]]), (2, 2))
    with pytest.raises(DataError, match="degenerate"):
        Dataset(np.array([[1]]), (1,))
    data = Dataset(np.array([[1, 2], [2, 1]]), (2, 2))
    assert data.variable_names == ("V1", "V2")
    assert data.x0.tolist() == [[0, 1], [1, 0]]


def test_csv_round_trip(tmp_path):
    data = Dataset(np.array([[1, 3], [2, 1], [1, 2]]), (2, 3), ("p", "q"),
                   (("no", "yes"), ("a", "b", "c")))
    p = tmp_path / "rt.csv"
    write_csv(p, data)
    back = load_csv(p, schema=data.schema())
    assert np.array_equal(back.codes, data.codes)
    assert back.variable_names == ("p", "q")


def test_dentist_table():
    data = load_csv(dentist_path())
    assert (data.n, data.d) == (3869, 5)
    assert data.modality_counts == (2, 2, 2, 2, 2)
    assert data.patterns.counts.max() == 1880


def test_patterns_reconstruct_rows():
    rng = np.random.default_rng(3)
    data = Dataset(rng.integers(1, 4, size=(200, 3)), (3, 3, 3))
    pat = data.patterns
    assert pat.n == 200
    assert np.array_equal(pat.x[pat.inverse], data.x0)
    xb, inv = pat.block((0, 2))
    assert np.array_equal(xb[inv], pat.x[:, [0, 2]])


def test_cramers_v_hand_computed():
    # chi2 = 20 for this table, so V = sqrt(20 / 80) = 0.5
    assert cramers_v_table(np.array([[30, 10], [10, 30]])) == pytest.approx(0.5, abs=1e-12)


def test_cramers_v_identical_and_independent_columns():
    same = Dataset(np.array([[1, 1], [2, 2], [1, 1], [2, 2]]), (2, 2))
    assert cramers_v(same, 0, 1) == pytest.approx(1.0)
    rows = [[a, b] for a in (1, 2) for b in (1, 2, 3)] * 4
    indep = Dataset(np.array(rows), (2, 3))
    assert cramers_v(indep, 0, 1) == pytest.approx(0.0, abs=1e-12)


def test_cramers_v_errors_and_weights():
    data = Dataset(np.array([[1, 1], [2, 2], [1, 2]]), (2, 2))
    with pytest.raises(DataError):
        cramers_v(data, 0, 0)
    with pytest.raises(DataError):
        cramers_v(data, 0, 1, weights=[0, 0, 0])
    with pytest.raises(DataError):
        cramers_v(data, 0, 1, weights=[1, -1, 1])
    # integer weights behave like repeated rows
    rep = Dataset(np.array([[1, 1], [2, 2], [2, 2], [1, 2], [1, 2], [1, 2]]), (2, 2))
    assert cramers_v(data, 0, 1, weights=[1, 2, 3]) == pytest.approx(cramers_v(rep, 0, 1))


def test_pairwise_matrix_identical_columns():
    data = Dataset(np.array([[1, 1], [2, 2], [1, 1]]), (2, 2))
    assert np.allclose(pairwise_v_matrix(data), [[1, 1], [1, 1]])
    with pytest.raises(DataError):
        pairwise_v_matrix(Dataset(np.array([[1], [2]]), (2,)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(2, 4))
def test_cramers_v_range_symmetry_and_marginals(seed, a, b):
    rng = np.random.default_rng(seed)
    data = Dataset(np.c_[rng.integers(1, a + 1, 60), rng.integers(1, b + 1, 60)], (a, b))
    v = cramers_v(data, 0, 1)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(cramers_v(data, 1, 0))
    table = contingency_table(data, 0, 1)
    assert table.sum() == data.n
    assert np.array_equal(table.sum(axis=1), np.bincount(data.x0[:, 0], minlength=a))
