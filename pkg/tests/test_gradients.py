"""Finite-difference checks of every differentiable operation.

The sweep uses the Richardson-extrapolated central difference: with plain
central differences at h=1e-4 the O(h^2) truncation term alone reaches ~1e-5
relative on small gradient entries of the curved ops (attention, aam).
"""

import numpy as np
import pytest

from asvdefense import numcore as nc

H = 1e-4
TOL = 1e-5

SEEDS = range(100)
# at s=30 a confidently classified row has gradients near 1e-9, below what
# differencing a loss of order 10 can resolve; s=10 keeps every row measurable
AAM_SCALE = 10.0


def _ops(rng):
    w = rng.normal(size=(4, 3))
    g = rng.normal(size=(4,))
    b = rng.normal(size=(4,))
    other = rng.normal(size=(3, 4))
    att = {k: nc.Tensor(rng.normal(size=(4, 4)) * 0.5) for k in ("wq", "wk", "wv", "wo")}
    labels = rng.integers(0, 3, size=3)
    fns = {
        "matmul_left": lambda x: nc.tsum(nc.mul(nc.matmul(x, w), rng_fixed(x.shape[0], 3))),
        "add": lambda x: nc.tsum(nc.mul(nc.add(x, other), other)),
        "sub": lambda x: nc.tsum(nc.mul(nc.sub(other, x), other)),
        "mul": lambda x: nc.tsum(nc.mul(x, other)),
        "scale": lambda x: nc.tsum(nc.mul(nc.scale(x, -1.7), other)),
        "gelu": lambda x: nc.tsum(nc.mul(nc.gelu(x), other)),
        "tanh": lambda x: nc.tsum(nc.mul(nc.tanh(x), other)),
        "relu": lambda x: nc.tsum(nc.mul(nc.relu(x), other)),
        "layer_norm": lambda x: nc.tsum(nc.mul(nc.layer_norm(x, g, b), other)),
        "softmax": lambda x: nc.tsum(nc.mul(nc.softmax_rows(x), other)),
        "l2_normalize": lambda x: nc.tsum(nc.mul(nc.l2_normalize(x), other)),
        "cosine": lambda x: nc.tsum(nc.cosine_similarity(x, other)),
        "l1_loss": lambda x: nc.l1_loss(x, other),
        "mean_reshape_transpose": lambda x: nc.mean(nc.mul(nc.transpose(nc.reshape(x, (4, 3))), other)),
        "cross_entropy": lambda x: nc.cross_entropy(x, labels),
        "aam_softmax": lambda x: nc.aam_softmax_loss(x, rng_fixed(5, 4), labels, 0.2, AAM_SCALE),
        "attention": lambda x: nc.tsum(nc.mul(nc.multihead_attention(x, x, x, 2, att), other)),
    }
    return fns, other


def rng_fixed(*shape):
    return np.random.default_rng(12345).normal(size=shape)


OP_NAMES = list(_ops(np.random.default_rng(0))[0])


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fns, other = _ops(rng)
        fn = fns[name]
        x = rng.normal(size=(3, 4))
        # keep clear of kinks: central differences straddle them
        if name == "relu":
            x = np.where(np.abs(x) < 0.01, 0.5, x)
        if name == "l1_loss":
            x = np.where(np.abs(x - other) < 0.01, x + 0.5, x)
        worst = max(worst, nc.grad_check(fn, x, H, richardson=True))
    assert worst < TOL, f"{name}: max relative error {worst:.2e}"
