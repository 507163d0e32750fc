"""A named battery of gradient checks over core ops and model blocks.

Used by the ``gradcheck`` CLI subcommand and by the release gate. All
checks run in double precision on small shapes: ops are held to 1e-4,
composite blocks to 1e-3. Deep compositions use a smaller probe step so
a finite-difference window cannot straddle a relu or max-pool kink.
"""
from __future__ import annotations

import numpy as np

from .gradcheck import BLOCK_TOLERANCE, OP_TOLERANCE, GradCheckReport, grad_check
from .model import TINY, build_variant
from .nn import batch_norm, conv2d, layer_norm, pool2d
from .branches import ResidualBlock, SpatialBlock
from .swint import InvertedBottleneck, TransformerBlock, WindowAttention, scaled_attention
from .tensor import Tensor

__all__ = ["run_suite", "SuiteEntry"]

DEEP_STEP = 1e-6  # keeps probes one-sided at relu/max-pool kinks


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _projector(rng, shape):
    """Fixed-weight scalar projection so elementwise errors cannot cancel.

    The weights are drawn once, outside the returned closure: the checked
    function must be deterministic across finite-difference probes.
    """
    w = Tensor(np.asarray(rng.standard_normal(shape)))

    def to_scalar(out: Tensor) -> Tensor:
        return (out * w).sum()

    return to_scalar


class SuiteEntry:
    def __init__(self, name: str, kind: str, build):
        self.name = name
        self.kind = kind  # "op" or "block"
        self.build = build

    def run(self, seed: int = 0) -> GradCheckReport:
        rng = np.random.default_rng(seed)
        fn, inputs, options = self.build(rng)
        tolerance = OP_TOLERANCE if self.kind == "op" else BLOCK_TOLERANCE
        return grad_check(fn, inputs, tolerance=tolerance,
                          rng=np.random.default_rng(seed + 1), **options)


def _op_matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    project = _projector(rng, (3, 2))
    return lambda: project(a @ b), [a, b], {}


def _op_conv2d(rng):
    x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    project = _projector(rng, (2, 4, 3, 3))
    fn = lambda: project(conv2d(x, w, b, stride=2, padding=1))
    return fn, [x, w, b], {}


def _op_pool_max(rng):
    x = _t(rng, 1, 2, 6, 6)
    project = _projector(rng, (1, 2, 3, 3))
    return lambda: project(pool2d(x, 2, 2, mode="max")), [x], {}


def _op_pool_avg(rng):
    x = _t(rng, 1, 2, 6, 6)
    project = _projector(rng, (1, 2, 3, 3))
    return lambda: project(pool2d(x, 2, 2, mode="avg")), [x], {}


def _op_softmax(rng):
    x = _t(rng, 3, 5)
    project = _projector(rng, (3, 5))
    return lambda: project(x.softmax(axis=-1)), [x], {}


def _op_gelu(rng):
    x = _t(rng, 4, 4)
    project = _projector(rng, (4, 4))
    return lambda: project(x.gelu()), [x], {}


def _op_layer_norm(rng):
    x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
    project = _projector(rng, (3, 6))
    return lambda: project(layer_norm(x, g, b)), [x, g, b], {}


def _op_batch_norm(rng):
    x, g, b = _t(rng, 4, 3, 5, 5), _t(rng, 3), _t(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    project = _projector(rng, (4, 3, 5, 5))
    fn = lambda: project(
        batch_norm(x, g, b, rm.copy(), rv.copy(), training=True))
    return fn, [x, g, b], {}


def _op_attention(rng):
    q, k, v = _t(rng, 2, 5, 4), _t(rng, 2, 5, 4), _t(rng, 2, 5, 4)
    project = _projector(rng, (2, 5, 4))
    fn = lambda: project(scaled_attention(q, k, v))
    return fn, [q, k, v], {}


def _block_window_attention(rng):
    m = WindowAttention(8, 2, 4, 2, 1, rng, dtype=np.float64)
    x = _t(rng, 1, 17, 8)
    project = _projector(rng, (1, 17, 8))
    fn = lambda: project(m(x))
    return fn, [x] + m.parameters(), {}


def _block_inverted_bottleneck(rng):
    m = InvertedBottleneck(6, 4, rng, dtype=np.float64).train()
    x = _t(rng, 1, 17, 6)
    project = _projector(rng, (1, 17, 6))
    fn = lambda: project(m(x))
    return fn, [x] + m.parameters(), {}


def _block_transformer(rng):
    m = TransformerBlock(8, 2, 4, 2, 1, rng, dtype=np.float64).train()
    x = _t(rng, 1, 17, 8)
    project = _projector(rng, (1, 17, 8))
    fn = lambda: project(m(x))
    return fn, [x] + m.parameters(), {}


def _block_residual(rng):
    m = ResidualBlock(3, 8, 2, rng, dtype=np.float64).train()
    x = Tensor(rng.random((1, 3, 6, 6)) + 0.1, requires_grad=True)
    project = _projector(rng, (1, 8, 3, 3))
    fn = lambda: project(m(x))
    return fn, [x] + m.parameters(), {"step": DEEP_STEP}


def _block_spatial(rng):
    m = SpatialBlock(3, 8, rng, merge_pools=True, dtype=np.float64).train()
    x = Tensor(rng.random((1, 3, 6, 6)) + 0.1, requires_grad=True)
    project = _projector(rng, (1, 8, 3, 3))
    fn = lambda: project(m(x))
    return fn, [x] + m.parameters(), {"step": DEEP_STEP}


def _block_full_model(rng):
    net = build_variant("rs-fme-swint", TINY, classes=2, dropout=0.0,
                        seed=13, dtype=np.float64).train()
    x = Tensor(rng.random((2, 32, 32, 3)))
    labels = np.array([0, 1])

    def loss():
        logits = net.forward(x)
        lse = (logits.exp().sum(axis=-1)).log()
        picked = (logits * np.eye(2)[labels]).sum(axis=-1)
        return (lse - picked).mean()

    return loss, net.parameters(), {"step": DEEP_STEP, "max_probes_per_input": 2}


ENTRIES = [
    SuiteEntry("matmul", "op", _op_matmul),
    SuiteEntry("conv2d", "op", _op_conv2d),
    SuiteEntry("pool2d_max", "op", _op_pool_max),
    SuiteEntry("pool2d_avg", "op", _op_pool_avg),
    SuiteEntry("softmax", "op", _op_softmax),
    SuiteEntry("gelu", "op", _op_gelu),
    SuiteEntry("layer_norm", "op", _op_layer_norm),
    SuiteEntry("batch_norm", "op", _op_batch_norm),
    SuiteEntry("scaled_attention", "op", _op_attention),
    SuiteEntry("mha_block", "block", _block_window_attention),
    SuiteEntry("irb", "block", _block_inverted_bottleneck),
    SuiteEntry("transformer_block", "block", _block_transformer),
    SuiteEntry("residual_block", "block", _block_residual),
    SuiteEntry("spatial_block", "block", _block_spatial),
    SuiteEntry("full_tiny_model", "block", _block_full_model),
]


def run_suite(seed: int = 0, names: list[str] | None = None
              ) -> list[tuple[SuiteEntry, GradCheckReport]]:
    chosen = ENTRIES if names is None else [e for e in ENTRIES if e.name in names]
    return [(entry, entry.run(seed)) for entry in chosen]
