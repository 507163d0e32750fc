"""Assembled variants: fusion layout, probability outputs, determinism."""
import numpy as np
import pytest

from rsfme import model as M
from rsfme.errors import ShapeError
from rsfme.gradcheck import grad_check
from rsfme.tensor import Tensor


def tiny_images(n=2, seed=0, size=32):
    rng = np.random.default_rng(seed)
    return rng.random((n, size, size, 3), dtype=np.float64).astype(np.float32)


class TestVariants:
    def test_unknown_variant_rejected(self):
        with pytest.raises(ShapeError):
            M.build_variant("resnet50")

    def test_four_distinct_fused_widths(self):
        widths = {}
        for name in M.VARIANTS:
            net = M.build_variant(name, M.TINY, classes=5, dropout=0.0, seed=1)
            widths[name] = net.fused_channels
        assert widths["swint"] == 32
        assert widths["swint+r"] == 32 + 256
        assert widths["swint+s"] == 32 + 128
        assert widths["rs-fme-swint"] == 32 + 256 + 128
        assert len(set(widths.values())) == 4

    def test_structural_width_ordering(self):
        w = {name: M.build_variant(name, M.TINY, seed=0).fused_channels
             for name in M.VARIANTS}
        assert w["rs-fme-swint"] > w["swint+r"] > w["swint"]
        assert w["swint+s"] > w["swint"]

    def test_full_variant_parameter_names_contain_swint_only(self):
        swint_only = {n for n, _ in M.build_variant("swint", M.TINY, seed=3).named_parameters()
                      if n.startswith("swint.")}
        full = {n for n, _ in M.build_variant("rs-fme-swint", M.TINY, seed=3).named_parameters()}
        assert swint_only <= full

    def test_every_variant_outputs_probability_vector(self):
        x = tiny_images()
        for name in M.VARIANTS:
            net = M.build_variant(name, M.TINY, classes=5, dropout=0.0, seed=2)
            net.eval()
            probs = net.predict(x)
            assert probs.shape == (2, 5)
            assert (probs.data >= 0).all()
            np.testing.assert_allclose(probs.data.sum(axis=1), np.ones(2), atol=1e-6)


class TestFusionLayout:
    def test_concat_order_and_slicing_round_trip(self):
        net = M.build_variant("rs-fme-swint", M.TINY, dropout=0.0, seed=4)
        net.eval()
        x = tiny_images()
        maps = net.branch_maps(x)
        fused = M.fuse(maps)
        lo = 0
        for m in maps:
            hi = lo + m.shape[1]
            np.testing.assert_array_equal(fused.data[:, lo:hi], m.data)
            lo = hi
        assert lo == net.fused_channels

    def test_single_branch_fusion_is_identity(self):
        net = M.build_variant("swint", M.TINY, dropout=0.0, seed=5)
        net.eval()
        maps = net.branch_maps(tiny_images())
        assert M.fuse(maps) is maps[0]

    def test_swint_map_on_fusion_grid(self):
        net = M.build_variant("rs-fme-swint", M.TINY, dropout=0.0, seed=6)
        net.eval()
        for m in net.branch_maps(tiny_images()):
            assert m.shape[2:] == (4, 4)


class TestClassify:
    def test_zero_head_gives_uniform(self):
        net = M.build_variant("swint", M.TINY, classes=5, dropout=0.0, seed=7)
        net.eval()
        net.head.weight.data = np.zeros_like(net.head.weight.data)
        net.head.bias.data = np.zeros_like(net.head.bias.data)
        probs = net.predict(tiny_images())
        np.testing.assert_allclose(probs.data, np.full((2, 5), 0.2), atol=1e-7)

    def test_argmax_invariant_to_logit_shift(self):
        net = M.build_variant("swint", M.TINY, classes=5, dropout=0.0, seed=8)
        net.eval()
        logits = net.forward(tiny_images())
        shifted = (logits + 7.5).softmax(axis=-1)
        plain = logits.softmax(axis=-1)
        np.testing.assert_array_equal(
            shifted.data.argmax(axis=1), plain.data.argmax(axis=1)
        )
        np.testing.assert_allclose(shifted.data, plain.data, atol=1e-6)

    def test_classify_functional_matches_predict(self):
        net = M.build_variant("swint+s", M.TINY, classes=3, dropout=0.0, seed=9)
        net.eval()
        x = tiny_images()
        fused = M.fuse(net.branch_maps(x))
        via_classify = M.classify(fused, net.head, net.dropout)
        np.testing.assert_allclose(via_classify.data, net.predict(x).data, rtol=1e-6)


class TestDeterminism:
    def test_same_seed_same_params_same_output(self):
        def run():
            net = M.build_variant("rs-fme-swint", M.TINY, dropout=0.0, seed=11)
            net.eval()
            return net.predict(tiny_images()).data.tobytes()

        assert run() == run()

    def test_dropout_draws_from_supplied_rng(self):
        net = M.build_variant("swint", M.TINY, dropout=0.5, seed=12)
        net.train()
        x = tiny_images()
        a = net.forward(x, rng=np.random.default_rng(0)).data
        b = net.forward(x, rng=np.random.default_rng(0)).data
        c = net.forward(x, rng=np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestEndToEndGradients:
    def test_sampled_parameter_gradients(self):
        # full tiny variant in double precision; 1% of parameters would be
        # thousands of probes, so sample a fixed handful per tensor instead.
        net = M.build_variant("rs-fme-swint", M.TINY, classes=2, dropout=0.0,
                              seed=13, dtype=np.float64)
        net.train()
        rng = np.random.default_rng(99)
        x = Tensor(rng.random((2, 32, 32, 3)))
        labels = np.array([0, 1])
        params = net.parameters()

        def loss():
            logits = net.forward(x)
            lse = (logits.exp().sum(axis=-1)).log()
            picked = (logits * np.eye(2)[labels]).sum(axis=-1)
            return (lse - picked).mean()

        # step 1e-6: at depth, a 1e-5 window occasionally straddles a
        # relu/max-pool kink; the smaller step keeps probes one-sided
        report = grad_check(
            loss, params, tolerance=1e-3, step=1e-6,
            rng=np.random.default_rng(7), max_probes_per_input=2,
        )
        assert report.passed, str(report)
