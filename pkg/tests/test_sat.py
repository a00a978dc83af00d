import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saigformer import gradcheck, sat
from saigformer.sat import BoxQuery, OpCounter, SatError

from oracles import naive_box, naive_prefix, supersampled_box


def test_ones_table():
    t = sat.build(np.ones((2, 2))).table
    assert np.array_equal(t[1:, 1:], [[1, 2], [2, 4]])
    assert np.all(t[0] == 0) and np.all(t[:, 0] == 0)


def dyadic_image(rng, shape):
    # 8-bit levels / 256: every partial sum is exactly representable, so any
    # summation order gives the same bits
    return rng.integers(0, 256, shape) / 256.0


def test_table_matches_naive_prefix_exactly():
    rng = np.random.default_rng(0)
    img = dyadic_image(rng, (7, 5))
    t = sat.build(img)
    assert np.array_equal(t.table, naive_prefix(img))
    assert t.table[7, 5] == img.sum()
    assert t.matches(img) and not t.matches(img + 1)


def test_table_close_to_naive_prefix_for_real_data():
    img = np.random.default_rng(0).standard_normal((7, 5))
    assert np.allclose(sat.build(img).table, naive_prefix(img), rtol=1e-12, atol=1e-12)


def test_build_rejects_bad_input():
    with pytest.raises(SatError):
        sat.build(np.zeros((0, 3)))
    with pytest.raises(SatError):
        sat.build(np.array([[1.0, np.nan]]))


def test_table_is_read_only():
    t = sat.build(np.ones((3, 3)))
    with pytest.raises(ValueError):
        t.table[1, 1] = 0


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**31))
def test_monotone_for_nonnegative(h, w, seed):
    t = sat.build(np.random.default_rng(seed).uniform(0, 1, (h, w))).table
    assert np.all(np.diff(t, axis=0) >= 0) and np.all(np.diff(t, axis=1) >= 0)


def test_box_sum_examples_and_op_count():
    s = sat.build(np.ones((2, 2)))
    c = OpCounter()
    assert sat.box_sum(s, BoxQuery(0, 0, 2, 2), c) == 4
    assert sat.box_sum(s, BoxQuery(1, 0, 1, 2), c) == 0
    assert (c.reads, c.adds) == (8, 6)


def test_box_sum_random_boxes_exact():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((16, 16))
    s = sat.build(img)
    for _ in range(200):
        x0, x1 = np.sort(rng.integers(0, 17, 2))
        y0, y1 = np.sort(rng.integers(0, 17, 2))
        assert sat.box_sum(s, BoxQuery(x0, y0, x1, y1)) == pytest.approx(naive_box(img, x0, y0, x1, y1), abs=1e-12)


def test_box_sum_exact_on_dyadic_images():
    rng = np.random.default_rng(2)
    img = dyadic_image(rng, (12, 9))
    s = sat.build(img)
    for _ in range(200):
        x0, x1 = np.sort(rng.integers(0, 10, 2))
        y0, y1 = np.sort(rng.integers(0, 13, 2))
        assert sat.box_sum(s, BoxQuery(x0, y0, x1, y1)) == naive_box(img, x0, y0, x1, y1)


def test_box_sum_errors():
    s = sat.build(np.ones((3, 3)))
    with pytest.raises(SatError):
        sat.box_sum(s, BoxQuery(0, 0, 4, 2))
    with pytest.raises(SatError):
        sat.box_sum(s, BoxQuery(0.5, 0, 2, 2))


def test_cost_independent_of_box_size():
    s = sat.build(np.ones((20, 20)))
    for size in (1, 5, 20):
        c = OpCounter()
        sat.box_sum(s, BoxQuery(0, 0, size, size), c)
        sat.box_sum_fractional(s, BoxQuery(0.3, 0.2, size - 0.1, size - 0.4), c)
        assert (c.reads, c.adds) == (8, 6)


def test_additivity_of_adjacent_boxes():
    rng = np.random.default_rng(3)
    s = sat.build(rng.integers(0, 9, (10, 10)).astype(float))
    for _ in range(50):
        x0, xm, x1 = np.sort(rng.integers(0, 11, 3))
        y0, y1 = np.sort(rng.integers(0, 11, 2))
        whole = sat.box_sum(s, BoxQuery(x0, y0, x1, y1))
        assert whole == sat.box_sum(s, BoxQuery(x0, y0, xm, y1)) + sat.box_sum(s, BoxQuery(xm, y0, x1, y1))


def test_fractional_equals_integer_query_at_integer_corners():
    rng = np.random.default_rng(4)
    s = sat.build(rng.standard_normal((9, 11)))
    for _ in range(100):
        x0, x1 = np.sort(rng.integers(0, 12, 2))
        y0, y1 = np.sort(rng.integers(0, 10, 2))
        q = BoxQuery(float(x0), float(y0), float(x1), float(y1))
        assert sat.box_sum_fractional(s, q) == sat.box_sum(s, q)


def test_fractional_constant_image_is_area():
    c = 0.37
    s = sat.build(np.full((13, 17), c))
    rng = np.random.default_rng(5)
    for _ in range(100):
        x0, x1 = np.sort(rng.uniform(0, 17, 2))
        y0, y1 = np.sort(rng.uniform(0, 13, 2))
        got = sat.box_sum_fractional(s, BoxQuery(x0, y0, x1, y1))
        assert got == pytest.approx(c * (x1 - x0) * (y1 - y0), rel=1e-6, abs=1e-12)


def test_fractional_vs_supersampling_oracle():
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, (12, 12))
    s = sat.build(img)
    for _ in range(60):
        x0, x1 = np.sort(rng.uniform(0, 12, 2))
        y0, y1 = np.sort(rng.uniform(0, 12, 2))
        ref = supersampled_box(img, x0, y0, x1, y1)
        got = sat.box_sum_fractional(s, BoxQuery(x0, y0, x1, y1))
        assert abs(got - ref) <= 1e-3 * max(abs(ref), 1e-9)


def test_fractional_clamps_and_rejects_nan():
    img = np.random.default_rng(7).uniform(0, 1, (5, 6))
    s = sat.build(img)
    assert sat.box_sum_fractional(s, BoxQuery(-3, -2, 9, 8)) == pytest.approx(img.sum(), rel=1e-14)
    with pytest.raises(SatError):
        sat.box_sum_fractional(s, BoxQuery(math.nan, 0, 1, 1))


def test_fractional_corner_gradients():
    reports = gradcheck.suite_sat(0)
    assert all(r.ok for r in reports), [r.line() for r in reports]


def test_clamped_corner_has_zero_gradient():
    s = sat.build(np.ones((4, 4)))
    _, g = sat.box_sum_fractional_grad(s, BoxQuery(-1.0, 0.5, 2.5, 3.5))
    assert g[0] == 0.0 and g[2] != 0.0


def test_vectorized_lookup_matches_scalar_reads():
    rng = np.random.default_rng(8)
    img = rng.standard_normal((6, 7))
    tables = sat.build_tables(img[None])
    xs, ys = rng.uniform(0, 7, 40), rng.uniform(0, 6, 40)
    val, _, _, _ = sat.bilinear_lookup(tables, xs[None], ys[None])
    s = sat.build(img)
    for k in range(40):
        full = sat.box_sum_fractional(s, BoxQuery(0.0, 0.0, xs[k], ys[k]))
        assert val[0, k] == pytest.approx(full, abs=1e-12)


def test_table_adjoint_is_transpose_of_build():
    rng = np.random.default_rng(9)
    img, g = rng.standard_normal((5, 4)), rng.standard_normal((6, 5))
    lhs = np.sum(sat.build_tables(img) * g)
    rhs = np.sum(img * sat.table_adjoint(g))
    assert lhs == pytest.approx(rhs, rel=1e-12)
