"""Triplane sampling, positional embedding, and point decoder."""

import math

import numpy as np
import pytest

from triplane_diffusion import autodiff as ad
from triplane_diffusion import field as tf
from triplane_diffusion.autodiff import ops


def _make_triplane(rng, batch=1, n_f=4, n=6, extent=2.0, dtype=np.float64,
                   trainable=False):
    data = rng.standard_normal((batch, 3 * n_f, n, n))
    feats = ad.parameter(data, dtype=dtype) if trainable else ad.constant(data)
    return tf.Triplane(feats, n_f=n_f, extent=extent)


class TestSampleTriplane:
    def test_point_on_shared_grid_node_sums_stored_features(self):
        rng = np.random.default_rng(0)
        n, n_f = 5, 3
        tri = _make_triplane(rng, n_f=n_f, n=n, extent=1.0)
        # world point (0, 0, 0) projects to the centre node of every plane
        out = tf.sample_triplane(tri, np.zeros((1, 1, 3))).data[0, 0]
        centre = n // 2
        feats = tri.features.data[0].reshape(3, n_f, n, n)
        expected = feats[:, :, centre, centre].sum(axis=0)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_far_outside_extent_gives_zero_vector(self):
        rng = np.random.default_rng(1)
        tri = _make_triplane(rng, extent=1.5)
        pts = np.array([[[10.0, -20.0, 30.0]]])
        np.testing.assert_array_equal(tf.sample_triplane(tri, pts).data, 0.0)

    def test_gradient_wrt_plane_features_matches_fd(self):
        rng = np.random.default_rng(2)
        tri = _make_triplane(rng, n_f=2, n=4, trainable=True)
        pts = rng.uniform(-1.8, 1.8, (1, 6, 3))
        def f(ps):
            return ops.tensor_sum(tf.sample_triplane(tri, pts))
        report = ad.grad_check(f, [tri.features], tol=1e-4)
        assert report.passed, str(report)

    def test_linearity_in_plane_features(self):
        rng = np.random.default_rng(3)
        n_f, n = 4, 6
        f1 = rng.standard_normal((1, 3 * n_f, n, n))
        f2 = rng.standard_normal((1, 3 * n_f, n, n))
        pts = rng.uniform(-2, 2, (1, 40, 3))
        s = lambda f: tf.sample_triplane(
            tf.Triplane(ad.constant(f), n_f, 2.0), pts).data
        np.testing.assert_allclose(s(f1 + f2), s(f1) + s(f2), atol=1e-10)

    def test_continuity_of_nearby_points(self):
        rng = np.random.default_rng(4)
        tri = _make_triplane(rng, n_f=2, n=8)
        tri.features.data[:] = np.clip(tri.features.data, -10, 10)
        base = rng.uniform(-1.5, 1.5, (1, 50, 3))
        shifted = base + 1e-6
        a = tf.sample_triplane(tri, base).data
        b = tf.sample_triplane(tri, shifted).data
        assert np.max(np.abs(a - b)) < 1e-3

    def test_batch_shape_mismatch_errors(self):
        rng = np.random.default_rng(5)
        tri = _make_triplane(rng, batch=2)
        with pytest.raises(ad.ShapeError):
            tf.sample_triplane(tri, np.zeros((1, 4, 3)))


class TestPositionalEmbedding:
    def test_origin_embedding(self):
        emb = tf.positional_embedding(np.zeros(3), n_freq=4)
        assert emb.shape == (3 + 24,)
        np.testing.assert_array_equal(emb[:3], 0.0)
        sin_part = emb[3:].reshape(4, 2, 3)[:, 0]
        cos_part = emb[3:].reshape(4, 2, 3)[:, 1]
        np.testing.assert_array_equal(sin_part, 0.0)
        np.testing.assert_array_equal(cos_part, 1.0)

    @pytest.mark.parametrize("n_freq", [0, 1, 6])
    def test_dimension(self, n_freq):
        emb = tf.positional_embedding(np.zeros((5, 3)), n_freq)
        assert emb.shape == (5, 3 + 6 * n_freq)
        assert tf.embedding_dim(n_freq) == emb.shape[-1]

    def test_sin_components_periodic(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(-1, 1, (10, 3))
        n_freq = 3
        for k in range(n_freq):
            freq = 2.0 ** k
            period = 2 * math.pi / freq
            for axis in range(3):
                shifted = p.copy()
                shifted[:, axis] += period
                a = tf.positional_embedding(p, n_freq)
                b = tf.positional_embedding(shifted, n_freq)
                sin_idx = 3 + 6 * k + axis
                np.testing.assert_allclose(a[:, sin_idx], b[:, sin_idx], atol=1e-9)

    def test_negative_n_freq_rejected(self):
        with pytest.raises(ValueError):
            tf.positional_embedding(np.zeros(3), -1)


class TestDecoder:
    def _decoder(self, rng, **kw):
        return tf.DecoderParams(n_f=4, n_freq=2, hidden=8, rng=rng, **kw)

    def test_zero_weights_give_softplus0_and_half_gray(self):
        rng = np.random.default_rng(7)
        dec = self._decoder(rng, density_bias=0.0)
        for name, p in dec.named_params():
            p.data[:] = 0.0
        feats = ad.constant(np.zeros((1, 3, 4)))
        pts = rng.uniform(-1, 1, (1, 3, 3))
        out = tf.decode(dec, pts, feats)
        np.testing.assert_allclose(out.gamma.data, math.log(2.0), atol=1e-12)
        np.testing.assert_allclose(out.color.data, 0.5, atol=1e-12)

    def test_pure_function_of_inputs(self):
        rng = np.random.default_rng(8)
        dec = self._decoder(rng)
        pts = rng.uniform(-1, 1, (1, 5, 3))
        feats = ad.constant(rng.standard_normal((1, 5, 4)))
        a = tf.decode(dec, pts, feats)
        b = tf.decode(dec, pts, feats)
        np.testing.assert_array_equal(a.gamma.data, b.gamma.data)
        np.testing.assert_array_equal(a.color.data, b.color.data)

    def test_outputs_always_in_range(self):
        rng = np.random.default_rng(9)
        dec = self._decoder(rng)
        for name, p in dec.named_params():
            p.data[:] = rng.standard_normal(p.shape) * 10
        pts = rng.uniform(-3, 3, (2, 50, 3))
        feats = ad.constant(rng.standard_normal((2, 50, 4)) * 10)
        out = tf.decode(dec, pts, feats)
        assert np.all(out.gamma.data >= 0)
        assert np.all((out.color.data >= 0) & (out.color.data <= 1))

    def test_density_gradient_wrt_weights_matches_fd(self):
        rng = np.random.default_rng(10)
        dec = self._decoder(rng)
        pts = rng.uniform(-1, 1, (1, 4, 3))
        feats = ad.constant(rng.standard_normal((1, 4, 4)))
        params = [p for _, p in dec.named_params()]
        def f(ps):
            return ops.tensor_sum(tf.decode(dec, pts, feats).gamma)
        # step 1e-4: truncation through softplus(silu) at 1e-3 grazes the tol
        report = ad.grad_check(f, params, step=1e-4, tol=1e-4,
                               names=[n for n, _ in dec.named_params()])
        assert report.passed, str(report)

    def test_feature_width_mismatch_errors(self):
        rng = np.random.default_rng(11)
        dec = self._decoder(rng)
        with pytest.raises(ad.ShapeError, match="feature channels"):
            tf.decode(dec, np.zeros((1, 2, 3)), ad.constant(np.zeros((1, 2, 5))))


class TestTriplaneType:
    def test_shape_validation(self):
        with pytest.raises(ad.ShapeError):
            tf.Triplane(ad.constant(np.zeros((1, 10, 4, 4))), n_f=4, extent=1.0)
        with pytest.raises(ValueError):
            tf.Triplane(ad.constant(np.zeros((1, 12, 4, 4))), n_f=4, extent=0.0)

    def test_plane_slicing(self):
        rng = np.random.default_rng(12)
        tri = _make_triplane(rng, n_f=2, n=4)
        for k in range(3):
            np.testing.assert_array_equal(
                tri.plane(k).data, tri.features.data[:, 2 * k:2 * k + 2])
