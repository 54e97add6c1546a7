"""Self-checks shared by the CLI and the acceptance tests: finite differences and the GRL contract."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Linear, ResidualBlock, batchnorm, linear
from .losses import BatchLabels, batch_losses
from .model import DannConfig, DannModel, StemConfig
from .tensor import Tensor, gradcheck


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    def t(*shape, lo=None):
        data = rng.normal(size=shape)
        if lo is not None:
            data = np.abs(data) + lo
        return Tensor(data, requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    pos = t(3, 4, lo=0.5)
    row = t(4)
    m1, m2 = t(3, 5), t(5, 2)
    img, w, bias = t(2, 3, 7, 7), t(4, 3, 3, 3), t(4)
    pool_in = t(2, 2, 6, 6)
    bn_in, gamma, beta = t(6, 3, 4, 4), t(3), t(3)
    gamma.data += 2.0
    mask = rng.random((3, 4)) > 0.5
    coeff = Tensor(rng.normal(size=(3, 4)))

    lin = Linear(5, 3, rng=rng)
    x_lin = t(4, 5)
    bn1 = BatchNorm(5)
    x_bn = t(6, 5)
    block = ResidualBlock(3, 4, stride=2, rng=rng)
    x_block = t(2, 3, 6, 6)

    def weighted(out):
        # a random projection so no output symmetry hides a wrong gradient
        c = Tensor(np.random.default_rng(out.size).normal(size=out.shape))
        return T.tsum(out * c)

    return {
        "add_broadcast": (lambda: weighted(a + row), [a, row]),
        "mul": (lambda: weighted(a * b), [a, b]),
        "div": (lambda: weighted(a / pos), [a, pos]),
        "power": (lambda: weighted(T.power(pos, 1.7)), [pos]),
        "exp_log": (lambda: weighted(T.exp(a) + T.log(pos)), [a, pos]),
        "sigmoid": (lambda: weighted(T.sigmoid(a)), [a]),
        "relu": (lambda: weighted(T.relu(a)), [a]),
        "where_clamp": (lambda: weighted(T.where(mask, a, T.clamp(b, -0.5, 0.5))), [a, b]),
        "mean_reshape": (lambda: weighted(T.reshape(T.mean(a * b, axis=1), (3, 1))), [a, b]),
        "getitem_concat": (lambda: weighted(T.concat([a[:, 1:3], b], axis=1)), [a, b]),
        "softmax": (lambda: weighted(T.softmax(a * coeff)), [a]),
        "matmul": (lambda: weighted(m1 @ m2), [m1, m2]),
        "conv2d": (lambda: weighted(T.conv2d(img, w, bias, stride=2, padding=1)), [img, w, bias]),
        "max_pool2d": (lambda: weighted(T.max_pool2d(pool_in, 3, 2, 1)), [pool_in]),
        "batch_norm_op": (lambda: weighted(T.batch_norm(bn_in, gamma, beta, (0, 2, 3), 1e-5)[0]),
                          [bn_in, gamma, beta]),
        "linear_layer": (lambda: weighted(linear(x_lin, lin.weight, lin.bias)), [x_lin, lin.weight, lin.bias]),
        "batchnorm_layer": (lambda: weighted(batchnorm(x_bn, bn1, "train")), [x_bn, bn1.scale, bn1.shift]),
        "residual_block": (lambda: weighted(block(x_block)), [x_block] + block.parameters()),
    }


def _model_case(rng: np.random.Generator):
    cfg = DannConfig(stem=StemConfig(stem_width=3, stem_kernel=3, widths=(3, 4), blocks=(1, 1)), patch_size=8,
                     cell_hidden=4, domain_hidden=4, seed=int(rng.integers(1 << 31)))
    model = DannModel(cfg)
    # the reversal path is checked by direct backward assertions instead
    model.grl = lambda x: x
    x = Tensor(rng.normal(size=(4, 3, 8, 8)))
    labels = BatchLabels.for_training([0, 1, 0, 1], [0, 0, 1, 1])

    def f():
        out = model(x)
        return batch_losses(out.p_cell, out.p_domain, labels)[0]

    return f, model.parameters()


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per case at 64-bit; ops, layers, both heads and the end-to-end total loss."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        cases = _cases(rng)
        cases["model_total_loss"] = _model_case(rng)
        return {name: gradcheck(f, params) for name, (f, params) in cases.items()}


def grl_contract(lams=(0.0, 0.5, 1.0), seed: int = 0) -> dict[float, bool]:
    """Forward identity and backward -lam*g, both compared exactly."""
    rng = np.random.default_rng(seed)
    out = {}
    with T.precision(np.float64):
        for lam in lams:
            x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
            g = rng.normal(size=(5, 4))
            y = T.reverse_gradient(x, lam)
            y.backward(g)
            out[lam] = bool(np.array_equal(y.data, x.data) and np.array_equal(x.grad, -lam * g))
    return out


def run_gradcheck(seed: int = 0, threshold: float = 1e-4) -> dict:
    start = time.perf_counter()
    errors = gradient_suite(seed)
    grl = grl_contract(seed=seed)
    worst = max(errors.values())
    return {"max_relative_error": worst, "per_case": errors, "grl": {str(k): v for k, v in grl.items()},
            "seconds": time.perf_counter() - start, "passed": worst < threshold and all(grl.values())}
