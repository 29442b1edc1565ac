"""Grid sampling against a scalar bilinear oracle, upsampling, differences."""

import numpy as np
import pytest

from deformad import numeric as nm


def bilinear_point_oracle(img, gx, gy):
    """Sample one (x, y) normalized location from a (H, W) plane, border clamp."""
    h, w = img.shape
    fx = (gx + 1.0) * 0.5 * (w - 1)
    fy = (gy + 1.0) * 0.5 * (h - 1)
    fx = min(max(fx, 0.0), w - 1.0)
    fy = min(max(fy, 0.0), h - 1.0)
    x0 = int(np.floor(fx))
    y0 = int(np.floor(fy))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    tx = fx - x0
    ty = fy - y0
    top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
    bot = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
    return top * (1 - ty) + bot * ty


def grid_sample_oracle(x, grid):
    n, c, h, w = x.shape
    out = np.zeros((n, c, grid.shape[1], grid.shape[2]), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for iy in range(grid.shape[1]):
                for ix in range(grid.shape[2]):
                    gx, gy = grid[ni, iy, ix]
                    out[ni, ci, iy, ix] = bilinear_point_oracle(
                        x[ni, ci], gx, gy)
    return out


class TestGridSample:
    def test_identity_grid_is_exact(self, fp64, rng):
        for h, w in [(2, 2), (3, 5), (7, 7), (14, 14), (16, 24), (64, 64)]:
            x = nm.Tensor(rng.normal(size=(2, 3, h, w)))
            grid = np.broadcast_to(nm.identity_grid(h, w), (2, h, w, 2))
            out = nm.grid_sample(x, nm.Tensor(np.ascontiguousarray(grid)))
            assert np.array_equal(out.data, x.data), (h, w)

    def test_one_pixel_shift_with_border_clamp(self, fp64):
        x = nm.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        grid = nm.identity_grid(2, 2)[None].copy()
        grid[..., 0] += 2.0 / (2 - 1)  # one pixel in +x
        out = nm.grid_sample(x, nm.Tensor(grid))
        assert np.array_equal(out.data[0, 0], [[2.0, 2.0], [4.0, 4.0]])

    def test_matches_point_oracle_random(self, fp64, rng):
        x = rng.normal(size=(1, 1, 5, 5))
        grid = rng.uniform(-0.95, 0.95, size=(1, 5, 5, 2))
        out = nm.grid_sample(nm.Tensor(x), nm.Tensor(grid))
        expected = grid_sample_oracle(x, grid)
        assert np.max(np.abs(out.data - expected)) < 1e-10

    def test_oracle_equivalence_many_instances(self, fp64, rng):
        for trial in range(40):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 3))
            h = int(rng.integers(2, 8))
            w = int(rng.integers(2, 8))
            x = rng.normal(size=(n, c, h, w))
            # include out-of-range points to exercise the clamp
            grid = rng.uniform(-1.4, 1.4, size=(n, h, w, 2))
            out = nm.grid_sample(nm.Tensor(x), nm.Tensor(grid))
            expected = grid_sample_oracle(x, grid)
            assert np.max(np.abs(out.data - expected)) < 1e-10

    def test_batch_mismatch_rejected(self, fp64):
        x = nm.Tensor(np.ones((2, 1, 4, 4)))
        grid = nm.Tensor(np.zeros((1, 4, 4, 2)))
        with pytest.raises(ValueError, match="batch"):
            nm.grid_sample(x, grid)

    def test_input_gradient_fd(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        grid = rng.uniform(-0.9, 0.9, size=(1, 4, 4, 2))

        def loss(xt):
            return (nm.grid_sample(xt, nm.Tensor(grid, dtype=np.float64)) ** 2).mean()

        nm.check_gradients(loss, [x], rel_tol=1e-5)

    def test_grid_gradient_fd(self, rng):
        # keep sample points interior and away from pixel-center kinks
        x = rng.normal(size=(1, 1, 5, 5))
        grid = (rng.uniform(-0.8, 0.8, size=(1, 4, 4, 2)) // 0.05) * 0.05 + 0.013

        def loss(gt):
            return (nm.grid_sample(nm.Tensor(x, dtype=np.float64), gt) ** 2).mean()

        nm.check_gradients(loss, [grid], rel_tol=1e-5)

    def test_shift_and_unshift_recovers_interior(self, fp64, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        step = 2.0 / 7  # one pixel
        g1 = nm.identity_grid(8, 8)[None].copy()
        g1[..., 0] += step
        mid = nm.grid_sample(nm.Tensor(x), nm.Tensor(g1))
        g2 = nm.identity_grid(8, 8)[None].copy()
        g2[..., 0] -= step
        back = nm.grid_sample(mid, nm.Tensor(g2))
        # interior columns recover exactly (integer shifts, no blending)
        assert np.allclose(back.data[..., :, 1:7], x[..., :, 1:7], atol=1e-12)


class TestBilinearUpsample:
    def test_constant_preserved(self, fp64):
        x = nm.Tensor(np.full((1, 1, 2, 3), 0.3))
        out = nm.bilinear_upsample(x, (7, 11))
        assert np.allclose(out.data, 0.3, atol=1e-15)

    def test_linear_ramp_values(self, fp64):
        x = nm.Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
        out = nm.bilinear_upsample(x, (2, 4))
        expected = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
        assert np.allclose(out.data[0, 0, 0], expected, atol=1e-15)
        assert np.allclose(out.data[0, 0, 1], expected, atol=1e-15)

    def test_same_size_is_identity(self, fp64, rng):
        x = nm.Tensor(rng.normal(size=(2, 3, 4, 5)))
        out = nm.bilinear_upsample(x, (4, 5))
        assert np.array_equal(out.data, x.data)

    def test_shrink_rejected(self, fp64):
        with pytest.raises(ValueError, match="smaller"):
            nm.bilinear_upsample(nm.Tensor(np.ones((1, 1, 4, 4))), (2, 8))

    def test_gradient_fd(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        nm.check_gradients(
            lambda xt: (nm.bilinear_upsample(xt, (7, 5)) ** 2).mean(),
            [x], rel_tol=1e-6)


class TestSpatialGradient:
    def test_constant_field_zero(self, fp64):
        f = nm.Tensor(np.full((1, 2, 4, 4), 0.7))
        dx, dy = nm.spatial_gradient(f)
        assert np.all(dx.data == 0.0)
        assert np.all(dy.data == 0.0)

    def test_hand_values(self, fp64):
        f = nm.Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2))
        dx, dy = nm.spatial_gradient(f)
        assert np.array_equal(dx.data[0, 0], [[1.0, 0.0], [1.0, 0.0]])
        assert np.array_equal(dy.data[0, 0], [[2.0, 2.0], [0.0, 0.0]])

    def test_x_ramp_has_zero_dy(self, fp64):
        ramp = np.tile(np.arange(5.0), (4, 1)).reshape(1, 1, 4, 5)
        _, dy = nm.spatial_gradient(nm.Tensor(ramp))
        assert np.all(dy.data == 0.0)

    def test_too_small_rejected(self, fp64):
        with pytest.raises(ValueError, match=">= 2"):
            nm.spatial_gradient(nm.Tensor(np.ones((1, 1, 1, 4))))

    def test_gradient_fd(self, rng):
        f = rng.normal(size=(1, 2, 4, 4))

        def loss(ft):
            dx, dy = nm.spatial_gradient(ft)
            return (dx * dx).sum() + (dy * dy * 0.5).sum()

        nm.check_gradients(loss, [f], rel_tol=1e-6)
