"""Residual and spatial branch behaviour against composition oracles."""
import numpy as np
import pytest

from rsfme import branches, nn
from rsfme.errors import ShapeError
from rsfme.gradcheck import grad_check
from rsfme.tensor import Tensor


class TestResidualBlock:
    def test_zero_f_is_activated_identity(self):
        rng = np.random.default_rng(0)
        block = branches.ResidualBlock(4, 4, 1, rng, dtype=np.float64)
        for name, p in block.named_parameters():
            if name.startswith(("conv_p", "conv_q")) or "beta" in name:
                p.data = np.zeros_like(p.data)
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        np.testing.assert_allclose(block(x).data, np.maximum(x.data, 0), atol=1e-12)

    def test_identity_skip_requires_matching_geometry(self):
        rng = np.random.default_rng(1)
        same = branches.ResidualBlock(8, 8, 1, rng)
        assert same.projection is None
        widened = branches.ResidualBlock(8, 12, 1, rng)
        assert widened.projection is not None
        assert widened.projection.weight.shape == (12, 8, 1, 1)
        strided = branches.ResidualBlock(8, 8, 2, rng)
        assert strided.projection is not None

    def test_matches_layer_by_layer_oracle(self):
        rng = np.random.default_rng(2)
        block = branches.ResidualBlock(3, 6, 2, rng, dtype=np.float64)
        x = rng.normal(size=(2, 3, 8, 8))
        got = block(Tensor(x)).data

        # independent composition from the same parameters
        def conv(x, w, b, stride):
            out = nn.conv2d(Tensor(x), Tensor(w.data), Tensor(b.data), stride, 1).data
            return out

        def bn(x, layer):
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = x.var(axis=(0, 2, 3), keepdims=True)
            g = layer.gamma.data.reshape(1, -1, 1, 1)
            b = layer.beta.data.reshape(1, -1, 1, 1)
            return (x - mu) / np.sqrt(var + layer.eps) * g + b

        h = np.maximum(bn(conv(x, block.conv_p.weight, block.conv_p.bias, 2), block.norm_p), 0)
        h = bn(conv(h, block.conv_q.weight, block.conv_q.bias, 1), block.norm_q)
        skip = nn.conv2d(Tensor(x), Tensor(block.projection.weight.data), None, 2, 0).data
        want = np.maximum(h + skip, 0)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        block = branches.ResidualBlock(2, 3, 2, rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        readout = rng.normal(size=(2, 3, 2, 2))
        report = grad_check(
            lambda: (block(x) * readout).sum(),
            [x] + block.parameters(),
            tolerance=1e-3,
        )
        assert report.passed, str(report)


class TestResidualBranch:
    def test_tiny_geometry_lands_on_fusion_grid(self):
        rng = np.random.default_rng(4)
        branch = branches.ResidualBranch(3, (64, 96, 160, 256), (2, 1, 1, 1), rng)
        out = branch(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        assert out.shape == (1, 256, 4, 4)

    def test_channel_schedule_endpoints(self):
        rng = np.random.default_rng(5)
        branch = branches.ResidualBranch(3, (64, 96, 160, 256), (2, 2, 1, 1), rng)
        assert branch.stem.weight.shape[0] == 64
        assert branch.out_channels == 256

    def test_zero_image_finite(self):
        rng = np.random.default_rng(6)
        branch = branches.ResidualBranch(3, (8, 12, 16, 24), (2, 1, 1, 1), rng)
        out = branch(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        assert np.isfinite(out.data).all()

    def test_schedule_stride_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            branches.ResidualBranch(3, (8, 12), (2, 1, 1), np.random.default_rng(0))


class TestSpatialBlock:
    def test_halves_extent(self):
        rng = np.random.default_rng(7)
        block = branches.SpatialBlock(3, 8, rng)
        out = block(Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32)))
        assert out.shape == (1, 8, 112, 112)

    def test_odd_extent_rejected(self):
        block = branches.SpatialBlock(3, 8, np.random.default_rng(8))
        with pytest.raises(ShapeError):
            block(Tensor(np.zeros((1, 3, 7, 7), dtype=np.float32)))

    def test_matches_layer_by_layer_oracle(self):
        rng = np.random.default_rng(9)
        block = branches.SpatialBlock(2, 4, rng, merge_pools=False, dtype=np.float64)
        x = rng.normal(size=(2, 2, 8, 8))
        got = block(Tensor(x)).data

        conv = nn.conv2d(Tensor(x), Tensor(block.conv.weight.data),
                         Tensor(block.conv.bias.data), 1, 1).data
        mu = conv.mean(axis=(0, 2, 3), keepdims=True)
        var = conv.var(axis=(0, 2, 3), keepdims=True)
        normed = (conv - mu) / np.sqrt(var + block.norm.eps)
        act = np.maximum(normed, 0)
        want = np.zeros((2, 4, 4, 4))
        for i in range(4):
            for j in range(4):
                want[:, :, i, j] = act[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-10)

    def test_merged_pools_on_constant_input(self):
        rng = np.random.default_rng(10)
        block = branches.SpatialBlock(1, 1, rng, merge_pools=True, dtype=np.float64)
        # identity-ish kernel: single center tap, no bias, neutral norm
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        block.conv.weight.data = w
        block.conv.bias.data = np.zeros(1)
        block.eval()  # running stats are (0, 1): conv output passes through
        x = Tensor(np.full((1, 1, 4, 4), 3.0))
        out = block(x)
        scale = 1.0 / np.sqrt(1.0 + block.norm.eps)
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 3.0 * scale),
                                   rtol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(11)
        block = branches.SpatialBlock(2, 3, rng, merge_pools=True, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        readout = rng.normal(size=(2, 3, 2, 2))
        report = grad_check(
            lambda: (block(x) * readout).sum(),
            [x] + block.parameters(),
            tolerance=1e-3,
        )
        assert report.passed, str(report)


class TestSpatialBranch:
    def test_full_profile_grid_progression(self):
        rng = np.random.default_rng(12)
        branch = branches.SpatialBranch(3, (4, 4, 4, 4, 4), 14, 224, rng)
        out = branch(Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32)))
        assert out.shape == (1, 4, 14, 14)

    def test_tiny_profile_ends_on_grid(self):
        rng = np.random.default_rng(13)
        branch = branches.SpatialBranch(3, (32, 64, 96, 128), 4, 32, rng)
        out = branch(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
        assert out.shape == (2, 128, 4, 4)

    def test_upsample_is_nearest(self):
        rng = np.random.default_rng(14)
        branch = branches.SpatialBranch(1, (2,), 4, 4, rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        out = branch(x)
        assert out.shape == (1, 2, 4, 4)
        np.testing.assert_array_equal(out.data[..., ::2, ::2], out.data[..., 1::2, 1::2])

    def test_incompatible_geometry_rejected(self):
        with pytest.raises(ShapeError):
            branches.SpatialBranch(3, (4, 4, 4), 4, 20, np.random.default_rng(0))
