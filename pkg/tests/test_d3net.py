import numpy as np
import pytest

from d3depth import gradcheck
from d3depth import tensor as T
from d3depth.core import DepthMap, RgbImage
from d3depth.d3net import (
    DESK_CONFIG,
    NetConfig,
    baseline_nn_fill,
    build_model,
    densify,
    forward,
    layer_shapes,
    predict_batch,
    sparse_pyramid,
)
from d3depth.exceptions import ParameterError, ShapeError
from d3depth.patterns import grid_pattern
from d3depth.sparsify import build_sparse_input


def _inputs(h, w, seed=0, a=8):
    rng = np.random.default_rng(seed)
    rgb = RgbImage(rng.uniform(0, 1, (h, w, 3)))
    depth = DepthMap(rng.uniform(1, 10, (h, w)))
    return rgb, build_sparse_input(depth, grid_pattern(h, w, a))


def test_layer_shapes_follow_the_densenet_convention():
    cfg = NetConfig(L=2, k=6, scales=3)
    shapes = layer_shapes(cfg)
    modules = ["enc1", "enc2", "mid", "dec2", "dec1"]
    for m in modules:
        for j in range(4):
            cin = cfg.module_input_channels + j * 6
            assert shapes[f"{m}.layer{j}.conv.w"] == (3, 3, cin, 6)
        assert shapes[f"{m}.trans.conv.w"] == (3, 3, cfg.module_input_channels + 24, 16)
    assert shapes["stem.w"] == (3, 3, 5, 16)
    assert shapes["head.out.conv.w"] == (3, 3, 8, 1)
    assert NetConfig(use_s2=False).input_channels == 4
    assert NetConfig(inject_sparse_everywhere=False).module_input_channels == 16


def test_config_validation():
    with pytest.raises(ParameterError):
        NetConfig(L=0)
    with pytest.raises(ParameterError):
        build_model("desk")


def test_fresh_model_returns_s1_exactly():
    model = build_model(seed=3)
    for seed in range(5):
        h, w = (24, 40) if seed % 2 else (17, 29)
        rgb, sparse = _inputs(h, w, seed, a=6)
        out = densify(model, rgb, sparse)
        assert out.shape == (h, w)
        np.testing.assert_array_equal(out.values, sparse.s1)


def test_output_shape_for_odd_sizes_and_variants():
    rng = np.random.default_rng(0)
    for cfg in (DESK_CONFIG, NetConfig(use_s2=False), NetConfig(inject_sparse_everywhere=False, scales=2)):
        model = build_model(cfg, seed=1)
        model.params["head.out.conv.w"].data[...] = rng.normal(0, 0.1, model.params["head.out.conv.w"].shape)
        res = forward(model, rng.uniform(0, 1, (2, 21, 35, 3)), rng.uniform(1, 2, (2, 21, 35)),
                      rng.uniform(0, 2, (2, 21, 35)), mode="train")
        assert res.shape == (2, 21, 35, 1)
        assert np.any(res.data != 0)


def test_forward_rejects_inconsistent_inputs():
    model = build_model()
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 16, 16, 3)), np.zeros((1, 16, 16)), np.zeros((1, 16, 8)))


def test_use_s2_false_ignores_s2():
    model = build_model(NetConfig(use_s2=False), seed=2)
    model.params["head.out.conv.w"].data[...] = 0.05
    rng = np.random.default_rng(1)
    rgb, s1 = rng.uniform(0, 1, (1, 16, 16, 3)), rng.uniform(1, 3, (1, 16, 16))
    a = forward(model, rgb, s1, np.zeros((1, 16, 16)), "eval").data
    b = forward(model, rgb, s1, rng.uniform(0, 5, (1, 16, 16)), "eval").data
    np.testing.assert_array_equal(a, b)


def test_sparse_pyramid_levels():
    s1 = np.arange(64, dtype=float).reshape(1, 8, 8)
    s2 = np.ones((1, 8, 8))
    pyr = sparse_pyramid(s1, s2, 2)
    assert pyr[1].shape == (1, 4, 4, 2) and pyr[2].shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(pyr[1][0, :, :, 0], s1[0, 1::2, 1::2])
    np.testing.assert_array_equal(pyr[2][0, :, :, 0], s1[0, 2::4, 2::4])
    assert sparse_pyramid(s1, s2, 1, use_s2=False)[1].shape[-1] == 1


def test_build_is_deterministic():
    a, b = build_model(seed=5), build_model(seed=5)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert a.parameter_count() == sum(np.prod(s) for s in layer_shapes(DESK_CONFIG).values())


def test_baseline_is_s1():
    _, sparse = _inputs(16, 16)
    np.testing.assert_array_equal(baseline_nn_fill(sparse).values, sparse.s1)


def test_prediction_is_s1_plus_residual():
    model = build_model(seed=0)
    model.params["head.out.conv.b"].data[...] = 0.25
    rng = np.random.default_rng(2)
    s1 = rng.uniform(1, 2, (1, 16, 16))
    pred, residual = predict_batch(model, rng.uniform(0, 1, (1, 16, 16, 3)), s1, np.ones((1, 16, 16)))
    np.testing.assert_allclose(pred.data[..., 0], s1 + residual.data[..., 0], rtol=1e-6)
    np.testing.assert_allclose(residual.data, 0.25)


def test_layer_gradients_within_tolerance():
    results = gradcheck.run_suite(seed=1, network=False)
    assert len(results) == 11
    for name, err in results.items():
        assert err < gradcheck.TOLERANCE, name


def test_batchnorm_cancels_upstream_biases():
    assert gradcheck.batchnorm_cancelled_bias_grad() < 1e-10


def test_single_training_step_reduces_loss():
    from d3depth.harness.training import Batch, batch_loss

    model = build_model(seed=0)
    rng = np.random.default_rng(0)
    rgb, sparse = _inputs(32, 32, 0, a=8)
    gt = rng.uniform(1, 10, (1, 32, 32))
    batch = Batch(rgb.channels[None], sparse.s1[None], sparse.s2[None], gt, 16)
    opt = T.Adam(model.params)
    first = float(batch_loss(model, batch, "train", True).data)
    for _ in range(5):
        T.backward(batch_loss(model, batch, "train", True))
        opt.step(1e-3)
    assert float(batch_loss(model, batch, "train", False).data) < first
