import numpy as np
import pytest
from hypothesis import given, strategies as st

from tvbilevel.exceptions import InvalidParam, ShapeMismatch
from tvbilevel.params import (ParamField, aggregate, format_field, lift, make_patch_map,
                              parse_field, parse_kind, patch_labels)


def test_scalar_aggregate_sums():
    pf = ParamField.scalar((4, 4), 0.3)
    assert aggregate(np.ones(16), pf).tolist() == [16.0]
    np.testing.assert_array_equal(lift(pf), np.full(16, 0.3))


def test_patch_cell_sum():
    pf = make_patch_map(4, 4, 2, 2)
    g = np.zeros((4, 4))
    g[:2, :2] = 1
    assert aggregate(g.ravel(), pf).tolist() == [4.0, 0.0, 0.0, 0.0]


def test_patch_floor_partition_5x5():
    labels = patch_labels(5, 5, 2, 2).reshape(5, 5)
    counts = np.bincount(labels.ravel())
    assert sorted(counts.tolist()) == [4, 6, 6, 9]
    assert counts.sum() == 25
    # rows floor(a*5/2): cell row 0 -> rows 0..1, cell row 1 -> rows 2..4
    assert (labels[:2, :2] == 0).all() and (labels[2:, 2:] == 3).all()


def test_patch_128_4x4_has_16_cells_of_1024():
    pf = make_patch_map(128, 128, 4, 4)
    assert pf.p == 16
    assert np.all(np.bincount(pf.labels) == 32 * 32)


def test_single_cell_is_scalar_equivalent():
    pf = make_patch_map(128, 128, 1, 1)
    assert pf.p == 1 and np.all(pf.labels == 0)


@given(m1=st.integers(1, 12), m2=st.integers(1, 12), data=st.data())
def test_patches_tile_grid(m1, m2, data):
    p1 = data.draw(st.integers(1, m1))
    p2 = data.draw(st.integers(1, m2))
    labels = patch_labels(m1, m2, p1, p2)
    counts = np.bincount(labels, minlength=p1 * p2)
    assert counts.sum() == m1 * m2
    assert np.all(counts > 0)


@given(kind=st.sampled_from(["scalar", "patch", "perpixel"]), seed=st.integers(0, 2**31))
def test_lift_aggregate_adjoint(kind, seed):
    rng = np.random.default_rng(seed)
    shape = (6, 5)
    if kind == "scalar":
        pf = ParamField.scalar(shape, 1.0)
    elif kind == "patch":
        pf = ParamField.patch(shape, 3, 2, 1.0)
    else:
        pf = ParamField.perpixel(shape, 1.0)
    x = rng.standard_normal(pf.p)
    g = rng.standard_normal(30)
    lhs = np.dot(pf.with_dofs(np.abs(x)).lift(), g)
    rhs = np.dot(np.abs(x), pf.aggregate(g))
    assert abs(lhs - rhs) <= 1e-13 * (1 + abs(lhs))


@given(seed=st.integers(0, 2**31))
def test_nonnegativity_preserved(seed):
    rng = np.random.default_rng(seed)
    pf = ParamField.patch((7, 7), 3, 3, rng.random(9))
    assert np.all(pf.lift() >= 0)
    assert np.all(pf.aggregate(rng.random(49)) >= 0)


def test_refine_keeps_lift():
    pf = ParamField.patch((8, 8), 2, 2, [0.1, 0.2, 0.3, 0.4])
    fine = pf.refine(4, 4)
    np.testing.assert_array_equal(fine.lift(), pf.lift())
    sc = ParamField.scalar((8, 8), 0.05).refine(2, 2)
    np.testing.assert_array_equal(sc.dofs, np.full(4, 0.05))


def test_validation():
    with pytest.raises(InvalidParam):
        ParamField.scalar((2, 2), -1.0)
    with pytest.raises(InvalidParam):
        ParamField.scalar((2, 2), np.nan)
    with pytest.raises(ShapeMismatch):
        ParamField("patch", (4, 4), [1.0, 2.0], (2, 2))
    with pytest.raises(InvalidParam):
        make_patch_map(4, 4, 5, 1)
    with pytest.raises(ShapeMismatch):
        ParamField.scalar((2, 2), 1.0).aggregate(np.ones(3))
    pf = ParamField.scalar((2, 2), 1.0)
    with pytest.raises(ValueError):
        pf.dofs[0] = 2.0


@pytest.mark.parametrize("text,p", [("scalar", 1), ("perpixel", 12), ("patch 2 3", 6),
                                    ("patch 2x3", 6)])
def test_parse_kind(text, p):
    assert parse_kind(text, (3, 4)).p == p


def test_parse_kind_errors():
    with pytest.raises(InvalidParam):
        parse_kind("patch two 2", (4, 4))
    with pytest.raises(InvalidParam):
        parse_kind("hexagonal", (4, 4))


@given(seed=st.integers(0, 2**31))
def test_field_text_round_trip(seed):
    rng = np.random.default_rng(seed)
    pf = ParamField.patch((9, 7), 3, 2, rng.random(6) * 10.0 ** rng.integers(-8, 3))
    back = parse_field(format_field(pf))
    assert back.kind == pf.kind and back.cells == pf.cells and back.shape == pf.shape
    np.testing.assert_array_equal(back.dofs, pf.dofs)
