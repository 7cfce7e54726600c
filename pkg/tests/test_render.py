import math

import numpy as np
import pytest

from gsir.core import GaussianSet, merge_sets
from gsir.render import RenderConfig, render, render_additive_check, render_backward

import params
from fixture import rng
from utils import assert_grads_close, random_set, set_grad_fd, single_gaussian

WIDE = RenderConfig(cutoff_sigmas=params.wide_cutoff)


class TestRender:
    def test_empty_is_black(self):
        out = render(GaussianSet.empty(), 8, 8)
        assert out.shape == (8, 8, 3)
        assert not out.any()

    def test_center_pixel(self):
        out = render(single_gaussian(3.5, 3.5), 8, 8)
        np.testing.assert_allclose(out[3, 3], [1.0, 0.0, 0.0])

    def test_one_pixel_right(self):
        out = render(single_gaussian(3.5, 3.5), 8, 8)
        np.testing.assert_allclose(out[3, 4], [math.exp(-0.5), 0.0, 0.0], rtol=1e-12)

    def test_cutoff(self):
        # 4 px away at sigma 1 is beyond 3 sigma
        out = render(single_gaussian(3.5, 3.5), 12, 8)
        assert out[3, 7, 0] == 0.0
        assert out[3, 6, 0] > 0.0

    def test_sigma_floor(self):
        tiny = render(single_gaussian(3.5, 3.5, scale=0.01), 8, 8)
        floor = render(single_gaussian(3.5, 3.5, scale=0.2), 8, 8)
        np.testing.assert_array_equal(tiny, floor)

    def test_homogeneity(self, rng):
        gset = random_set(rng, 16, 32, 32)
        k = 2.5
        np.testing.assert_allclose(render(gset.replace(color=gset.color * k), 32, 32),
                                   k * render(gset, 32, 32), rtol=1e-6, atol=1e-12)

    def test_translation(self, rng):
        gset = random_set(rng, 12, 32, 32)
        base = render(gset, 32, 32)
        shifted = render(gset.replace(mu=gset.mu + np.array([3.0, 2.0])), 32, 32)
        np.testing.assert_allclose(shifted[2:, 3:], base[:-2, :-3], atol=1e-6)

    def test_deterministic(self, rng):
        gset = random_set(rng, 40, 48, 40)
        a = render(gset, 48, 40)
        b = render(gset, 48, 40)
        c = render(gset, 48, 40, RenderConfig(threads=4))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)

    def test_tile_size_does_not_matter(self, rng):
        gset = random_set(rng, 20, 40, 24)
        np.testing.assert_allclose(render(gset, 40, 24, RenderConfig(tile_size=4)),
                                   render(gset, 40, 24, RenderConfig(tile_size=16)), atol=1e-12)


class TestAdditivity:
    def test_empty_side(self, rng):
        assert render_additive_check(GaussianSet.empty(), random_set(rng, 5, 16, 16), 16, 16) == 0.0

    def test_duplicate(self):
        g = single_gaussian(4.0, 4.0)
        assert render_additive_check(g, g, 8, 8) <= 1e-6

    def test_random_split(self, rng):
        gset = random_set(rng, 64, 32, 32)
        cut = 27
        assert render_additive_check(gset.subset(np.arange(cut)), gset.subset(np.arange(cut, 64)), 32, 32) <= 1e-5

    @pytest.mark.slow
    def test_large_scenes(self, rng):
        for _ in range(20):
            gset = random_set(rng, 1000, 128, 128)
            perm = rng.permutation(1000)
            cut = int(rng.integers(1, 1000))
            a, b = gset.subset(np.sort(perm[:cut])), gset.subset(np.sort(perm[cut:]))
            assert render_additive_check(a, b, 128, 128) <= 1e-5
            np.testing.assert_allclose(render(merge_sets(a, b), 128, 128),
                                       render(a, 128, 128) + render(b, 128, 128), atol=1e-5)


class TestBackward:
    def test_zero_upstream(self, rng):
        gset = random_set(rng, 6, 16, 16)
        grads = render_backward(gset, np.zeros((16, 16, 3)))
        assert grads.count == 6
        for name in ("d_mu", "d_log_scale", "d_theta", "d_color"):
            assert not getattr(grads, name).any()

    def test_stationary_at_mode(self):
        gset = single_gaussian(3.5, 3.5, scale=1.5, theta=0.4)
        d_out = np.zeros((8, 8, 3))
        d_out[3, 3] = 1.0
        grads = render_backward(gset, d_out)
        np.testing.assert_allclose(grads.d_color[0], [1.0, 1.0, 1.0])
        np.testing.assert_allclose(grads.d_mu[0], [0.0, 0.0], atol=1e-12)

    def test_culled_pixels_give_nothing(self):
        gset = single_gaussian(3.5, 3.5)
        d_out = np.zeros((8, 16, 3))
        d_out[:, 10:] = 1.0
        grads = render_backward(gset, d_out)
        assert not grads.d_color.any() and not grads.d_mu.any()

    def test_finite_differences(self, rng):
        for _ in range(3):
            gset = random_set(rng, 8, 32, 32, min_scale=0.8)
            d_out = rng.normal(size=(32, 32, 3))

            def loss(g):
                return float(np.sum(d_out * render(g, 32, 32, WIDE)))

            assert_grads_close(render_backward(gset, d_out, WIDE), set_grad_fd(loss, gset))

    def test_finite_differences_with_cutoff(self, rng):
        # pixel-centered, axis-aligned ellipses: no pixel center lies within 0.8 of q = 9
        gset = GaussianSet(
            mu=[[8.5, 8.5], [20.5, 9.5], [10.5, 22.5], [23.5, 24.5]],
            log_scale=np.log([[0.75, 1.05]] * 4),
            theta=[0.0, math.pi / 2, 0.0, math.pi / 2],
            color=rng.uniform(-1.0, 1.0, size=(4, 3)),
        )
        d_out = rng.normal(size=(32, 32, 3))

        def loss(g):
            return float(np.sum(d_out * render(g, 32, 32)))

        assert_grads_close(render_backward(gset, d_out), set_grad_fd(loss, gset))

    def test_threads_agree(self, rng):
        gset = random_set(rng, 30, 40, 40)
        d_out = rng.normal(size=(40, 40, 3))
        a = render_backward(gset, d_out)
        b = render_backward(gset, d_out, RenderConfig(threads=3))
        np.testing.assert_array_equal(a.d_mu, b.d_mu)
        np.testing.assert_array_equal(a.d_theta, b.d_theta)

    @pytest.mark.slow
    def test_finite_differences_many_scenes(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 17))
            gset = random_set(rng, n, 32, 32, min_scale=0.8)
            d_out = rng.normal(size=(32, 32, 3))

            def loss(g):
                return float(np.sum(d_out * render(g, 32, 32, WIDE)))

            assert_grads_close(render_backward(gset, d_out, WIDE), set_grad_fd(loss, gset))
