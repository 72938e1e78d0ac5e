"""Finite-difference verification of every layer and of the whole network.

Each case builds a small float64 graph ending in a scalar and reports the
maximum relative error between analytic and central-difference gradients.
Random targets keep the losses away from degenerate zero gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .d3net import DESK_CONFIG, NetConfig, build_model, predict_batch

TOLERANCE = 1e-4


def _param(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _case_conv(stride, k, cin, cout, seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 6, 6, cin)
    w = _param(rng, k, k, cin, cout, scale=0.5)
    b = _param(rng, cout)
    readout = np.random.default_rng(seed + 1)
    r = T.Tensor(readout.normal(size=(2, -(-6 // stride), -(-6 // stride), cout)))
    fn = lambda: T._sum(T._mul(T.conv2d(x, w, b, stride), r))  # noqa: E731
    return T.finite_difference_check(fn, [x, w, b])


def _case_upsample_conv(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 3, 4, 5)
    w = _param(rng, 3, 3, 5, 3, scale=0.5)
    b = _param(rng, 3)
    r = T.Tensor(rng.normal(size=(2, 6, 8, 3)))
    return T.finite_difference_check(lambda: T._sum(T._mul(T.upsample_conv(x, w, b), r)), [x, w, b])


def _case_batchnorm(mode, seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 4, 4, 3)
    gamma = T.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = _param(rng, 3, scale=0.3)
    state = T.BatchNormState(rng.normal(0, 0.3, 3), rng.uniform(0.5, 2.0, 3), updates=1)
    r = T.Tensor(rng.normal(size=(2, 4, 4, 3)))

    def fn():
        out = T.batchnorm_relu(x, gamma, beta, state, mode, update_stats=False)
        return T._sum(T._mul(out, r))

    return T.finite_difference_check(fn, [x, gamma, beta])


def _case_relu(seed):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.1, 1.0, (4, 5)) * rng.choice([-1.0, 1.0], (4, 5))
    x = T.Tensor(data, requires_grad=True)
    r = T.Tensor(rng.normal(size=(4, 5)))
    return T.finite_difference_check(lambda: T._sum(T._mul(T.relu(x), r)), [x])


def _case_concat_add(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_param(rng, 1, 3, 3, 2) for _ in range(3))
    r = T.Tensor(rng.normal(size=(1, 3, 3, 4)))

    def fn():
        return T._sum(T._mul(T.concat([T.add(a, b), c]), r))

    return T.finite_difference_check(fn, [a, b, c])


def _case_l2(seed):
    rng = np.random.default_rng(seed)
    pred = _param(rng, 2, 4, 4, 1)
    target = rng.normal(size=(2, 4, 4, 1))
    valid = rng.random((2, 4, 4, 1)) < 0.7
    return T.finite_difference_check(lambda: T.l2_loss(pred, target, valid), [pred])


def _case_chain(seed):
    """conv -> batchnorm_relu (eval) -> conv -> masked L2."""
    rng = np.random.default_rng(seed)
    x = _param(rng, 1, 6, 6, 2)
    w1, b1 = _param(rng, 3, 3, 2, 4, scale=0.5), _param(rng, 4)
    w2, b2 = _param(rng, 3, 3, 4, 1, scale=0.5), _param(rng, 1)
    gamma = T.Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
    beta = _param(rng, 4, scale=0.3)
    state = T.BatchNormState(rng.normal(0, 0.3, 4), rng.uniform(0.5, 2.0, 4), updates=1)
    target = rng.normal(size=(1, 6, 6, 1))
    valid = np.ones((1, 6, 6, 1), dtype=bool)

    def fn():
        h = T.batchnorm_relu(T.conv2d(x, w1, b1), gamma, beta, state, "eval", update_stats=False)
        return T.l2_loss(T.conv2d(h, w2, b2), target, valid)

    return T.finite_difference_check(fn, [x, w1, b1, w2, b2, gamma, beta])


def network_case(config: NetConfig = DESK_CONFIG, seed: int = 0, max_coords: int = 3, mode: str = "train",
                 height: int = 16, width: int = 24) -> float:
    """Full network forward -> masked L2, in float64.

    The zero-initialised output head is replaced by random weights so that
    every upstream parameter receives a nonzero gradient. In train mode the
    biases of convolutions that feed a batchnorm are left out: batch
    statistics cancel them, so their true gradient is exactly zero and a
    relative error would only measure roundoff (see
    :func:`batchnorm_cancelled_bias_grad`).
    """
    model, fn = _network_problem(config, seed, mode, height, width)
    params = [p for name, p in model.params.items() if mode != "train" or not _cancelled(name)]
    return T.finite_difference_check(fn, params, max_coords=max_coords, seed=seed)


def _cancelled(name):
    return name.endswith(".b") and not name.startswith("head.out")


def batchnorm_cancelled_bias_grad(config: NetConfig = DESK_CONFIG, seed: int = 0) -> float:
    """Largest |gradient| of any train-mode bias that a batchnorm cancels."""
    model, fn = _network_problem(config, seed, "train", 16, 24)
    T.backward(fn())
    worst = max(float(np.abs(p.grad).max()) for n, p in model.params.items() if _cancelled(n))
    for p in model.params.values():
        p.grad = None
    return worst


def _network_problem(config, seed, mode, height, width):
    rng = np.random.default_rng(seed)
    model = build_model(config, seed=seed, dtype=np.float64)
    for name in ("head.out.conv.w", "head.out.conv.b"):
        p = model.params[name]
        p.data = rng.normal(0.0, 0.3, p.shape)
    for name, p in model.params.items():
        if name.endswith(".beta") or (name.endswith(".b") and not name.startswith("head.out")):
            p.data = rng.normal(0.0, 0.1, p.shape)
    for state in model.bn.values():
        state.mean = rng.normal(0.0, 0.1, state.mean.shape)
        state.var = rng.uniform(0.5, 2.0, state.var.shape)
        state.updates = 1
    n = 2
    rgb = rng.uniform(0, 1, (n, height, width, 3))
    s1 = rng.uniform(1, 5, (n, height, width))
    s2 = np.sqrt(rng.uniform(0, 4, (n, height, width)))
    gt = s1 + rng.normal(0, 0.5, s1.shape)
    valid = np.ones(gt.shape + (1,), dtype=bool)

    def fn():
        pred, _ = predict_batch(model, rgb, s1, s2, mode, update_stats=False)
        return T.l2_loss(pred, gt[..., None], valid)

    return model, fn


def run_suite(seed: int = 0, network: bool = True) -> dict[str, float]:
    """Maximum relative gradient error per case."""
    results = {
        "conv3x3_stride1": _case_conv(1, 3, 3, 4, seed),
        "conv3x3_stride1_narrow": _case_conv(1, 3, 5, 2, seed),
        "conv3x3_stride2": _case_conv(2, 3, 3, 4, seed),
        "conv1x1": _case_conv(1, 1, 3, 2, seed),
        "upsample_conv": _case_upsample_conv(seed),
        "batchnorm_relu_train": _case_batchnorm("train", seed),
        "batchnorm_relu_eval": _case_batchnorm("eval", seed),
        "relu": _case_relu(seed),
        "concat_add": _case_concat_add(seed),
        "l2_loss": _case_l2(seed),
        "conv_bn_l2_chain": _case_chain(seed),
    }
    if network:
        results["network_train_mode"] = network_case(seed=seed, mode="train")
        results["network_eval_mode"] = network_case(seed=seed, mode="eval")
    return results
