import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinace.data import (
    TwinDataset,
    TwinPair,
    Zygosity,
    center,
    read_csv,
    residualize,
    write_csv,
)
from twinace.errors import InsufficientDataError, ParseError, SchemaError, SingularityError


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_zygosity_weights():
    assert Zygosity.MZ.weight == 1.0
    assert Zygosity.DZ.weight == 0.5
    np.testing.assert_array_equal(Zygosity.DZ.kinship, [[1, 0.5], [0.5, 1]])


def test_read_csv_two_rows(tmp_path):
    p = _write(tmp_path, "t1,t2,zyg\n1.0,1.2,MZ\n0.5,-0.3,dz\n")
    d = read_csv(p, ["t1", "t2"], "zyg")
    assert len(d) == 2 and d.n_mz == 1 and d.n_dz == 1
    assert d.pairs[0] == TwinPair(1.0, 1.2, Zygosity.MZ, {})
    assert d.pairs[1].zygosity is Zygosity.DZ


def test_read_csv_header_only(tmp_path):
    d = read_csv(_write(tmp_path, "t1,t2,zyg\n"), ["t1", "t2"], "zyg")
    assert len(d) == 0
    with pytest.raises(InsufficientDataError):
        d.require_both_groups()


def test_read_csv_bad_zygosity_cites_row(tmp_path):
    p = _write(tmp_path, "t1,t2,zyg\n1,2,MZ\n1,2,XY\n")
    with pytest.raises(ParseError) as err:
        read_csv(p, ["t1", "t2"], "zyg")
    assert err.value.row == 2


def test_read_csv_missing_column(tmp_path):
    p = _write(tmp_path, "t1,t2,zyg\n1,2,MZ\n")
    with pytest.raises(SchemaError, match="age"):
        read_csv(p, ["t1", "t2"], "zyg", ["age"])


def test_read_csv_non_numeric(tmp_path):
    p = _write(tmp_path, "t1,t2,zyg\n1,2,MZ\n1,abc,DZ\n")
    with pytest.raises(ParseError) as err:
        read_csv(p, ["t1", "t2"], "zyg")
    assert err.value.row == 2


def test_read_csv_missing_cells(tmp_path):
    p = _write(tmp_path, "t1,t2,zyg\n1,2,MZ\n1,,DZ\n3,4,DZ\n")
    assert len(read_csv(p, ["t1", "t2"], "zyg")) == 2
    with pytest.raises(ParseError):
        read_csv(p, ["t1", "t2"], "zyg", drop_missing=False)


def test_read_csv_binary_coding(tmp_path):
    p = _write(tmp_path, "t1,t2,zyg,sex\n1,2,MZ,M\n1,2,DZ,F\n3,4,DZ,m\n")
    d = read_csv(p, ["t1", "t2"], "zyg", binary_cols={"sex": "M"})
    np.testing.assert_array_equal(d.covariate("sex"), [1, 0, 1])
    p = _write(tmp_path, "t1,t2,zyg,sex\n1,2,MZ,M\n1,2,DZ,F\n3,4,DZ,X\n", "e.csv")
    with pytest.raises(ParseError):
        read_csv(p, ["t1", "t2"], "zyg", binary_cols={"sex": "M"})


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    y = rng.standard_normal((50, 2)) * 1e3
    d = TwinDataset.from_arrays(y, rng.random(50) < 0.5, {"age": rng.random(50) * 30})
    p = tmp_path / "rt.csv"
    write_csv(d, p)
    back = read_csv(p, ["y1", "y2"], "zygosity", ["age"])
    assert np.array_equal(back.y, d.y)
    assert np.array_equal(back.mz, d.mz)
    assert np.array_equal(back.covariates, d.covariates)


def test_dataset_is_immutable():
    d = TwinDataset.from_arrays([[1, 2]], [True])
    with pytest.raises(ValueError):
        d.y[0, 0] = 5


def test_from_pairs_checks_covariates():
    pairs = [TwinPair(1, 2, Zygosity.MZ, {"sex": 1}), TwinPair(1, 2, Zygosity.DZ, {})]
    with pytest.raises(ValueError):
        TwinDataset.from_pairs(pairs, ["sex"])


# residualize ---------------------------------------------------------------


def test_residualize_no_covariates_is_grand_mean():
    y = np.array([[1.0, 3.0], [2.0, 6.0], [0.0, 0.0]])
    d = TwinDataset.from_arrays(y, [True, False, True])
    r, model = residualize(d)
    np.testing.assert_allclose(r.y, y - y.mean(), atol=1e-12)
    np.testing.assert_allclose(model.coefficients, [y.mean()])


def test_residualize_perfect_fit():
    x = np.arange(8.0)
    y = np.column_stack([2 + 3 * x, 2 + 3 * x])
    d = TwinDataset.from_arrays(y, x % 2 == 0, {"x": x})
    r, _ = residualize(d)
    assert np.max(np.abs(r.y)) < 1e-10


def test_residualize_matches_hand_normal_equations():
    # 12 x 2 stacked design solved exactly with fractions: b0 = 25/21, b1 = 81/70
    x = np.arange(6.0)
    y = np.array([[1, 2], [2, 2], [3, 5], [4, 4], [6, 5], [7, 8]], float)
    d = TwinDataset.from_arrays(y, [True, False] * 3, {"x": x})
    r, model = residualize(d)
    np.testing.assert_allclose(model.coefficients, [25 / 21, 81 / 70], rtol=1e-12)
    assert abs(r.y.mean()) < 1e-10


def test_residualize_idempotent():
    rng = np.random.default_rng(0)
    n = 40
    d = TwinDataset.from_arrays(rng.standard_normal((n, 2)) + 5, rng.random(n) < 0.5,
                                {"age": rng.uniform(10, 30, n), "sex": rng.integers(0, 2, n)})
    once, _ = residualize(d)
    twice, _ = residualize(once)
    assert np.max(np.abs(once.y - twice.y)) < 1e-10


def test_residualize_rank_deficient_names_columns():
    x = np.arange(5.0)
    d = TwinDataset.from_arrays(np.ones((5, 2)), [True] * 5, {"a": x, "b": 2 * x, "c": x**2})
    with pytest.raises(SingularityError) as err:
        residualize(d)
    assert set(err.value.columns) == {"a", "b"}


def test_residualize_too_few_rows():
    d = TwinDataset.from_arrays([[1.0, 2.0]], [True], {"a": [1.0], "b": [2.0]})
    with pytest.raises(InsufficientDataError):
        residualize(d)


# center ---------------------------------------------------------------------


def test_center_global():
    d = TwinDataset.from_arrays([[1, 3], [3, 1]], [True, False])
    np.testing.assert_array_equal(center(d, "global").y, [[-1, 1], [1, -1]])


def test_center_idempotent():
    d = TwinDataset.from_arrays([[-1, 1], [1, -1], [0.5, -0.5]], [True, False, True])
    np.testing.assert_allclose(center(d, "global").y, d.y, atol=1e-12)


def test_center_per_zygosity():
    # MZ mean 2, DZ mean -2
    y = np.array([[1.0, 3.0], [2.0, 2.0], [-1.0, -3.0], [-2.0, -2.0]])
    d = TwinDataset.from_arrays(y, [True, True, False, False])
    c = center(d, "per_zygosity")
    assert c.y[c.mz].mean() == 0 and c.y[~c.mz].mean() == 0
    np.testing.assert_array_equal(c.y, [[-1, 1], [0, 0], [1, -1], [0, 0]])


def test_center_per_zygosity_needs_both_groups():
    with pytest.raises(InsufficientDataError):
        center(TwinDataset.from_arrays([[1, 2]], [True]), "per_zygosity")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.booleans()), min_size=1, max_size=30))
def test_center_global_preserves_within_pair_differences(rows):
    y = np.array([[a, b] for a, b, _ in rows])
    d = TwinDataset.from_arrays(y, [z for *_, z in rows])
    c = center(d, "global")
    # exact up to the rounding of the subtraction itself
    tol = 8 * np.finfo(float).eps * max(1.0, np.abs(y).max())
    np.testing.assert_allclose(c.y[:, 0] - c.y[:, 1], y[:, 0] - y[:, 1], rtol=0, atol=tol)
