import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclenet.tensor import (
    InvalidArgument,
    SeededRng,
    as_tensor,
    center_crop,
    compose_permutations,
    interpolation_matrix,
    inverse_permutation,
    permute_axes,
    trilinear_resize,
    zero_pad,
)


def test_permute_identity_is_bitwise():
    t = np.random.default_rng(0).standard_normal((2, 3, 4))
    out = permute_axes(t, (0, 1, 2))
    assert out.tobytes() == t.tobytes()


def test_permute_transpose_2x3():
    t = np.array([[1, 2, 3], [4, 5, 6]], dtype=float)
    np.testing.assert_array_equal(permute_axes(t, (1, 0)), [[1, 4], [2, 5], [3, 6]])


def test_permute_rank_mismatch():
    with pytest.raises(InvalidArgument):
        permute_axes(np.zeros((2, 3)), (0, 1, 2))
    with pytest.raises(InvalidArgument):
        permute_axes(np.zeros((2, 3)), (0, 0))


def test_permute_is_pure():
    t = np.arange(24.0).reshape(2, 3, 4)
    before = t.copy()
    out = permute_axes(t, (2, 0, 1))
    out[...] = -1
    np.testing.assert_array_equal(t, before)


perms3 = st.permutations([0, 1, 2])


@settings(max_examples=50, deadline=None)
@given(p=perms3, q=perms3, seed=st.integers(0, 2**32 - 1))
def test_permutation_algebra(p, q, seed):
    t = np.random.default_rng(seed).standard_normal((2, 3, 4))
    out = permute_axes(t, p)
    assert out.shape == tuple(t.shape[i] for i in p)
    np.testing.assert_array_equal(permute_axes(out, inverse_permutation(p)), t)
    np.testing.assert_array_equal(permute_axes(out, q), permute_axes(t, compose_permutations(p, q)))
    assert sorted(out.ravel()) == sorted(t.ravel())
    assert out.sum() == pytest.approx(t.sum(), abs=1e-12)


def test_permuted_element_matches_source():
    t = np.arange(24.0).reshape(2, 3, 4)
    out = permute_axes(t, (2, 0, 1))
    for i, j, k in np.ndindex(*t.shape):
        assert out[k, i, j] == t[i, j, k]


def test_as_tensor_validation():
    with pytest.raises(InvalidArgument):
        as_tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(InvalidArgument):
        as_tensor([], shape=(0, 2))
    with pytest.raises(InvalidArgument):
        as_tensor([1, 2, 3], shape=(2, 2))
    np.testing.assert_array_equal(as_tensor([1, 2, 3, 4], shape=(2, 2)), [[1, 2], [3, 4]])


def test_zero_pad_examples():
    t = np.array([5.0])
    np.testing.assert_array_equal(zero_pad(t, [(1, 1)]), [0, 5, 0])
    u = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_array_equal(zero_pad(u, [(0, 0), (0, 0)]), u)
    with pytest.raises(InvalidArgument):
        zero_pad(u, [(-1, 0), (0, 0)])


@settings(max_examples=40, deadline=None)
@given(pads=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=3, max_size=3),
       seed=st.integers(0, 1000))
def test_zero_pad_properties(pads, seed):
    t = np.random.default_rng(seed).standard_normal((2, 3, 2))
    p = zero_pad(t, pads)
    assert p.shape == tuple(s + a + b for s, (a, b) in zip(t.shape, pads))
    assert p.sum() == pytest.approx(t.sum(), abs=1e-12)
    np.testing.assert_array_equal(center_crop(p, pads), t)
    assert np.abs(p).sum() == pytest.approx(np.abs(t).sum())


def test_interpolation_oracle_ramp():
    ramp = np.arange(4.0).reshape(4, 1, 1)
    out = trilinear_resize(ramp, (7, 1, 1))
    np.testing.assert_allclose(out.ravel(), [0, 0.5, 1, 1.5, 2, 2.5, 3], atol=1e-15)


def test_interpolation_matrix_rows_are_affine():
    for a in range(1, 7):
        for b in range(1, 9):
            m = interpolation_matrix(a, b)
            np.testing.assert_allclose(m.sum(axis=1), 1.0)
            assert np.all(m >= 0)
            # endpoints are kept
            assert m[0, 0] == 1.0
            if b > 1:
                assert m[-1, -1] == 1.0


def test_resize_identity_and_constant():
    t = np.random.default_rng(2).standard_normal((3, 4, 5))
    np.testing.assert_allclose(trilinear_resize(t, t.shape), t, atol=1e-12)
    c = np.full((3, 4, 2), 1.75)
    np.testing.assert_allclose(trilinear_resize(c, (5, 1, 7)), 1.75, atol=1e-12)


def test_resize_to_single_takes_index_zero():
    t = np.arange(5.0).reshape(5, 1, 1)
    assert trilinear_resize(t, (1, 1, 1)).item() == 0.0


def test_resize_errors():
    with pytest.raises(InvalidArgument):
        trilinear_resize(np.ones((2, 2, 2)), (0, 2, 2))
    with pytest.raises(InvalidArgument):
        trilinear_resize(np.ones((2, 2)), (2, 2))


@settings(max_examples=40, deadline=None)
@given(shape=st.tuples(*[st.integers(1, 5)] * 3), new=st.tuples(*[st.integers(1, 6)] * 3),
       seed=st.integers(0, 1000))
def test_resize_range_preserving(shape, new, seed):
    t = np.random.default_rng(seed).standard_normal(shape)
    out = trilinear_resize(t, new)
    assert out.shape == new
    assert out.min() >= t.min() - 1e-12
    assert out.max() <= t.max() + 1e-12


def test_resize_separable_against_scalar_formula():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((3, 4, 2))
    out = trilinear_resize(t, (5, 3, 4))

    def lerp_coords(n_in, n_out, i):
        if n_out == 1 or n_in == 1:
            return 0, 0, 0.0
        s = i * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(s)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        return lo, hi, s - lo

    for i, j, k in np.ndindex(*out.shape):
        acc = 0.0
        xs = lerp_coords(3, 5, i)
        ys = lerp_coords(4, 3, j)
        zs = lerp_coords(2, 4, k)
        for xi, wx in ((xs[0], 1 - xs[2]), (xs[1], xs[2])):
            for yi, wy in ((ys[0], 1 - ys[2]), (ys[1], ys[2])):
                for zi, wz in ((zs[0], 1 - zs[2]), (zs[1], zs[2])):
                    acc += wx * wy * wz * t[xi, yi, zi]
        assert out[i, j, k] == pytest.approx(acc, abs=1e-12)


def test_rng_determinism_and_streams():
    a = SeededRng(42).uniform(size=10)
    b = SeededRng(42).uniform(size=10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(SeededRng(42).uniform(size=10), SeededRng(43).uniform(size=10))
    assert not np.array_equal(SeededRng(42, 1).uniform(size=10), SeededRng(42, 2).uniform(size=10))
    r = SeededRng(7)
    np.testing.assert_array_equal(r.spawn(3).random(5), SeededRng(7).spawn(3).random(5))


def test_rng_state_roundtrip():
    r = SeededRng(5)
    r.random(3)
    state = r.get_state()
    x = r.random(4)
    r.set_state(state)
    np.testing.assert_array_equal(r.random(4), x)
