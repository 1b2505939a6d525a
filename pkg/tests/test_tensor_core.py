import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgnn_cna.tensor_core import (
    ShapeError,
    Transform,
    add,
    concat_cols,
    elementwise,
    facewise_product,
    mode3_product,
    sigmoid,
    slice_matrix_power,
    t_product,
    t_product_backward,
)


def circular_conv_oracle(x, y):
    """Brute force: out[t] = sum_s x[s] @ y[(t - s) mod T]."""
    T = x.shape[0]
    out = np.zeros((T, x.shape[1], y.shape[2]))
    for t in range(T):
        for s in range(T):
            out[t] += x[s] @ y[(t - s) % T]
    return out


def explicit_t_product(x, y, tf):
    """((x x3 M) facewise (y x3 M)) x3 M^-1 with dense matrices, no shortcuts."""
    xh = np.einsum("ts,sij->tij", tf.matrix, x)
    yh = np.einsum("ts,sjk->tjk", tf.matrix, y)
    prod = np.einsum("tij,tjk->tik", xh, yh)
    return np.einsum("ts,sik->tik", tf.inverse, prod).real


dims = st.integers(1, 4)
slots = st.integers(1, 6)


@st.composite
def triple(draw):
    i, j, k, T = draw(dims), draw(dims), draw(dims), draw(slots)
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    return rng.normal(size=(T, i, j)), rng.normal(size=(T, j, k)), rng.normal(size=(T, k, draw(dims)))


class TestTransform:
    @pytest.mark.parametrize("kind", ["identity", "dft"])
    @pytest.mark.parametrize("T", [1, 2, 5, 12])
    def test_inverse(self, kind, T):
        tf = Transform.make(kind, T)
        np.testing.assert_allclose(tf.matrix @ tf.inverse, np.eye(T), atol=1e-10)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Transform.make("haar", 4)


class TestMode3:
    def test_identity_unchanged(self):
        x = np.random.default_rng(0).normal(size=(3, 2, 4))
        np.testing.assert_array_equal(mode3_product(x, np.eye(3)), x)

    def test_two_point_butterfly(self):
        a, b = 2.0, 5.0
        x = np.array([a, b]).reshape(2, 1, 1)
        out = mode3_product(x, np.array([[1.0, 1.0], [1.0, -1.0]]))
        np.testing.assert_array_equal(out.ravel(), [a + b, a - b])

    @pytest.mark.parametrize("T", [2, 3, 7])
    def test_roundtrip(self, T):
        x = np.random.default_rng(T).normal(size=(T, 3, 2))
        tf = Transform.dft(T)
        back = mode3_product(mode3_product(x, tf.matrix), tf.inverse)
        assert not np.iscomplexobj(back)
        np.testing.assert_allclose(back, x, atol=1e-9)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            mode3_product(np.zeros((3, 2, 2)), np.eye(4))


class TestFacewise:
    def test_identity_slices(self):
        x = np.random.default_rng(1).normal(size=(3, 2, 4))
        eye = np.broadcast_to(np.eye(4), (3, 4, 4))
        np.testing.assert_array_equal(facewise_product(x, eye), x)

    def test_hand_product(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        y = np.array([[[5.0], [6.0]]])
        np.testing.assert_array_equal(facewise_product(x, y), [[[17.0], [39.0]]])

    def test_zero_annihilates(self):
        y = np.random.default_rng(2).normal(size=(2, 3, 3))
        assert not np.any(facewise_product(np.zeros((2, 4, 3)), y))

    @pytest.mark.parametrize("shapes", [((2, 3, 4), (2, 3, 4)), ((2, 3, 4), (3, 4, 2))])
    def test_mismatch(self, shapes):
        with pytest.raises(ShapeError):
            facewise_product(np.zeros(shapes[0]), np.zeros(shapes[1]))


class TestTProduct:
    def test_identity_equals_facewise_bitwise(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 5, 2))
        assert np.array_equal(t_product(x, y, Transform.identity(4)), facewise_product(x, y))

    def test_single_slot_is_matrix_product(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(1, 3, 2)), rng.normal(size=(1, 2, 4))
        for kind in ("identity", "dft"):
            np.testing.assert_allclose(t_product(x, y, Transform.make(kind, 1))[0], x[0] @ y[0], rtol=1e-12)

    def test_dft_two_slots(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 3, 2))
        out = t_product(x, y, Transform.dft(2))
        np.testing.assert_allclose(out[0], x[0] @ y[0] + x[1] @ y[1], rtol=1e-10)
        np.testing.assert_allclose(out[1], x[0] @ y[1] + x[1] @ y[0], rtol=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(triple())
    def test_dft_matches_circular_convolution(self, xyz):
        x, y, _ = xyz
        T = x.shape[0]
        expected = circular_conv_oracle(x, y)
        np.testing.assert_allclose(t_product(x, y, Transform.dft(T)), expected, rtol=1e-8, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(triple())
    def test_fft_route_matches_dense_composition(self, xyz):
        x, y, _ = xyz
        tf = Transform.dft(x.shape[0])
        np.testing.assert_allclose(t_product(x, y, tf), explicit_t_product(x, y, tf), rtol=1e-8, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(triple(), st.sampled_from(["identity", "dft"]))
    def test_associative(self, xyz, kind):
        x, y, z = xyz
        tf = Transform.make(kind, x.shape[0])
        left = t_product(t_product(x, y, tf), z, tf)
        right = t_product(x, t_product(y, z, tf), tf)
        np.testing.assert_allclose(left, right, rtol=1e-8, atol=1e-10)

    def test_slot_count_checked(self):
        with pytest.raises(ShapeError):
            t_product(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), Transform.dft(4))

    @pytest.mark.parametrize("kind", ["identity", "dft"])
    def test_backward_is_adjoint(self, kind):
        # <G, d(x*y)> must equal <dx, delta_x> + <dy, delta_y> for the bilinear map
        rng = np.random.default_rng(6)
        T = 5
        tf = Transform.make(kind, T)
        x, y = rng.normal(size=(T, 3, 4)), rng.normal(size=(T, 4, 2))
        g = rng.normal(size=(T, 3, 2))
        dx, dy = t_product_backward(x, y, g, tf)
        ex, ey = rng.normal(size=x.shape), rng.normal(size=y.shape)
        lhs = np.sum(g * (t_product(ex, y, tf) + t_product(x, ey, tf)))
        assert np.isclose(lhs, np.sum(dx * ex) + np.sum(dy * ey), rtol=1e-10)

    def test_dense_backward_route_agrees(self):
        # a generic invertible transform exercises the matrix route of the adjoint
        rng = np.random.default_rng(7)
        T = 4
        m = rng.normal(size=(T, T)) + 3 * np.eye(T)
        tf = Transform("custom", T, m, np.linalg.inv(m))
        x, y, g = rng.normal(size=(T, 2, 3)), rng.normal(size=(T, 3, 2)), rng.normal(size=(T, 2, 2))
        dx, dy = t_product_backward(x, y, g, tf)
        ex, ey = rng.normal(size=x.shape), rng.normal(size=y.shape)
        lhs = np.sum(g * (explicit_t_product(ex, y, tf) + explicit_t_product(x, ey, tf)))
        assert np.isclose(lhs, np.sum(dx * ex) + np.sum(dy * ey), rtol=1e-9)


class TestPowers:
    path = np.array([[[0, 1, 0], [1, 0, 1], [0, 1, 0]]], dtype=float)

    def test_power_one(self):
        np.testing.assert_array_equal(slice_matrix_power(self.path, 1), self.path)

    def test_two_hop_paths(self):
        sq = slice_matrix_power(self.path, 2)
        assert sq[0, 0, 2] == 1
        assert sq[0, 0, 0] == 1

    def test_power_zero_is_identity(self):
        np.testing.assert_array_equal(slice_matrix_power(self.path, 0)[0], np.eye(3))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            slice_matrix_power(self.path, -1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 1000))
    def test_power_additivity(self, j, k, seed):
        a = np.random.default_rng(seed).normal(size=(3, 4, 4)) / 2
        lhs = slice_matrix_power(a, j + k)
        rhs = facewise_product(slice_matrix_power(a, j), slice_matrix_power(a, k))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-12)


class TestHelpers:
    def test_sigmoid_zero(self):
        out = elementwise(np.zeros((2, 3, 4)), sigmoid)
        assert np.all(out == 0.5)

    def test_add_inverse(self):
        x = np.random.default_rng(8).normal(size=(2, 3, 3))
        assert not np.any(add(x, -x))

    def test_concat_shape(self):
        assert concat_cols(np.zeros((4, 5, 3)), np.ones((4, 5, 3))).shape == (4, 5, 6)

    def test_add_mismatch(self):
        with pytest.raises(ShapeError):
            add(np.zeros((1, 2, 3)), np.zeros((1, 3, 2)))

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(np.array([-1e4, 0.0, 1e4]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[2] == 1.0
