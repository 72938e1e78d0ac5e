"""The D3 densification network and the nearest-neighbour fill baseline.

Wiring, for ``scales = s``::

    input (RGB, S1[, S2])
      -> 3x3 stride-2 stem                              level 1
      -> s-1 encoder DenseNet modules, stride-2 exits   levels 2..s
      -> bottleneck DenseNet module                     level s
      -> s-1 decoder DenseNet modules, upsample exits,
         each summed with the encoder features of the
         same resolution                                 levels s-1..1
      -> upsample head -> 3x3 conv to one channel        level 0

Each DenseNet module runs ``2L`` pre-activation layers
(batchnorm, ReLU, 3x3 conv to ``k`` channels), each fed the concatenation of
the module input and all earlier layer outputs, then a transition layer
(batchnorm, ReLU, conv) to ``stem_width`` channels. With
``inject_sparse_everywhere`` the sparse maps, resampled to the module's
resolution, are concatenated to every module input. The network output is a
residual added to S1.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .core import DepthMap, RgbImage, SparseInput, require_same_shape
from .exceptions import ParameterError, ShapeError

MIN_DEPTH = 0.001


@dataclass(frozen=True)
class NetConfig:
    """Network hyper-parameters.

    ``L`` and ``k`` follow the DenseNet convention: each module has ``2L``
    layers emitting ``k`` feature maps. ``scales`` counts stride-2 stages.
    """

    L: int = 2
    k: int = 6
    scales: int = 3
    inject_sparse_everywhere: bool = True
    use_s2: bool = True
    stem_width: int = 16
    head_width: int = 8

    def __post_init__(self):
        for name in ("L", "k", "scales", "stem_width", "head_width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ParameterError(f"NetConfig.{name} must be an integer >= 1, got {value!r}")

    @property
    def sparse_channels(self) -> int:
        return 2 if self.use_s2 else 1

    @property
    def input_channels(self) -> int:
        return 3 + self.sparse_channels

    @property
    def module_input_channels(self) -> int:
        return self.stem_width + (self.sparse_channels if self.inject_sparse_everywhere else 0)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DESK_CONFIG = NetConfig()
PAPER_CONFIG = NetConfig(L=5, k=12)


@dataclass
class D3Model:
    config: NetConfig
    params: dict          # name -> tensor.Tensor (trainable)
    bn: dict             # name -> tensor.BatchNormState

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "D3Model":
        return D3Model(
            self.config,
            {k: T.Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()},
            copy.deepcopy(self.bn),
        )

    def astype(self, dtype) -> "D3Model":
        m = self.copy()
        for p in m.params.values():
            p.data = p.data.astype(dtype)
        for s in m.bn.values():
            s.mean, s.var = s.mean.astype(dtype), s.var.astype(dtype)
        return m


# ---------------------------------------------------------------------------
# construction


def _module_specs(config: NetConfig):
    """(prefix, transition kind) for every DenseNet module, in forward order."""
    specs = [(f"enc{i}", "down") for i in range(1, config.scales)]
    specs.append(("mid", "same"))
    specs += [(f"dec{i}", "up") for i in range(config.scales - 1, 0, -1)]
    return specs


def layer_shapes(config: NetConfig) -> dict[str, tuple]:
    """Every parameter name with its shape, in initialisation order."""
    shapes: dict[str, tuple] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (k, k, cin, cout)
        shapes[f"{name}.b"] = (cout,)

    def bn(name, c):
        shapes[f"{name}.gamma"] = (c,)
        shapes[f"{name}.beta"] = (c,)

    w = config.stem_width
    conv("stem", config.input_channels, w)
    cin = config.module_input_channels
    for prefix, _ in _module_specs(config):
        for j in range(2 * config.L):
            c = cin + j * config.k
            bn(f"{prefix}.layer{j}.bn", c)
            conv(f"{prefix}.layer{j}.conv", c, config.k)
        c = cin + 2 * config.L * config.k
        bn(f"{prefix}.trans.bn", c)
        conv(f"{prefix}.trans.conv", c, w)
    bn("head.up.bn", w)
    conv("head.up.conv", w, config.head_width)
    bn("head.out.bn", config.head_width)
    conv("head.out.conv", config.head_width, 1)
    return shapes


def build_model(config: NetConfig = DESK_CONFIG, seed: int = 0, dtype=np.float32) -> D3Model:
    """Create a model with He-initialised convolutions and a zero output head."""
    if not isinstance(config, NetConfig):
        raise ParameterError(f"expected NetConfig, got {type(config).__name__}")
    rng = np.random.default_rng(seed)
    params, bn = {}, {}
    for name, shape in layer_shapes(config).items():
        if name.startswith("head.out.conv"):
            data = np.zeros(shape)
        elif name.endswith(".w"):
            fan_in = shape[0] * shape[1] * shape[2]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = T.Tensor(data.astype(dtype), requires_grad=True, name=name)
        if name.endswith(".bn.gamma"):
            bn[name[: -len(".gamma")]] = T.BatchNormState.fresh(shape[0], dtype)
    return D3Model(config, params, bn)


# ---------------------------------------------------------------------------
# forward


def _pad_to(a, multiple):
    """Replicate-pad axes 1 and 2 of an (N, H, W, ...) array up to a multiple."""
    h, w = a.shape[1:3]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return a
    pad = [(0, 0), (0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 3)
    return np.pad(a, pad, mode="edge")


def sparse_pyramid(s1, s2, scales, use_s2=True):
    """Sparse maps at levels 1..scales: S1 by nearest sampling, S2 by average pooling.

    Returns a list indexed by level (entry 0 unused), each (N, h, w, C).
    """
    out = [None]
    pooled = s2
    for level in range(1, scales + 1):
        f = 2**level
        n, h, w = pooled.shape
        pooled = pooled.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        near = s1[:, f // 2::f, f // 2::f]
        maps = [near, pooled] if use_s2 else [near]
        out.append(np.stack(maps, axis=-1).astype(s1.dtype))
    return out


def _bn_relu(model, name, x, mode, update_stats):
    p = model.params
    return T.batchnorm_relu(
        x, p[f"{name}.gamma"], p[f"{name}.beta"], model.bn[name], mode, update_stats
    )


def _conv(model, name, x, stride=1):
    return T.conv2d(x, model.params[f"{name}.w"], model.params[f"{name}.b"], stride=stride)


def _dense_module(model, prefix, x, injected, transition, mode, update_stats):
    cfg = model.config
    if injected is not None:
        x = T.concat([x, T.Tensor(injected)])
    features = [x]
    for j in range(2 * cfg.L):
        inp = features[0] if j == 0 else T.concat(features)
        h = _bn_relu(model, f"{prefix}.layer{j}.bn", inp, mode, update_stats)
        features.append(_conv(model, f"{prefix}.layer{j}.conv", h))
    h = _bn_relu(model, f"{prefix}.trans.bn", T.concat(features), mode, update_stats)
    if transition == "down":
        return _conv(model, f"{prefix}.trans.conv", h, stride=2)
    if transition == "up":
        p = model.params
        return T.upsample_conv(h, p[f"{prefix}.trans.conv.w"], p[f"{prefix}.trans.conv.b"])
    return _conv(model, f"{prefix}.trans.conv", h)


def forward(model: D3Model, rgb, s1, s2, mode="train", update_stats=True) -> T.Tensor:
    """Network residual for a batch.

    ``rgb`` is (N, H, W, 3); ``s1`` and ``s2`` are (N, H, W). Inputs are
    replicate-padded to a multiple of ``2**scales`` and the (N, H, W, 1)
    residual is cropped back to the input size.
    """
    cfg = model.config
    dtype = model.dtype
    rgb = np.asarray(rgb, dtype=dtype)
    s1 = np.asarray(s1, dtype=dtype)
    s2 = np.asarray(s2, dtype=dtype)
    if rgb.ndim != 4 or rgb.shape[3] != 3 or s1.shape != rgb.shape[:3] or s2.shape != s1.shape:
        raise ShapeError(f"forward: rgb {rgb.shape}, s1 {s1.shape}, s2 {s2.shape} are inconsistent")
    h, w = s1.shape[1:]
    multiple = 2**cfg.scales
    rgb_p = _pad_to(rgb, multiple)
    s1_p = _pad_to(s1, multiple)
    s2_p = _pad_to(s2, multiple)
    maps = [rgb_p, s1_p[..., None]] + ([s2_p[..., None]] if cfg.use_s2 else [])
    x0 = T.Tensor(np.concatenate(maps, axis=-1))
    pyramid = sparse_pyramid(s1_p, s2_p, cfg.scales, cfg.use_s2) if cfg.inject_sparse_everywhere else None

    x = _conv(model, "stem", x0, stride=2)
    skips = {1: x}
    level = 1
    for prefix, transition in _module_specs(cfg):
        injected = pyramid[level] if pyramid is not None else None
        x = _dense_module(model, prefix, x, injected, transition, mode, update_stats)
        if transition == "down":
            level += 1
            if level < cfg.scales:
                skips[level] = x
        elif transition == "up":
            level -= 1
            x = T.add(x, skips[level])
    p = model.params
    x = _bn_relu(model, "head.up.bn", x, mode, update_stats)
    x = T.upsample_conv(x, p["head.up.conv.w"], p["head.up.conv.b"])
    x = _bn_relu(model, "head.out.bn", x, mode, update_stats)
    x = _conv(model, "head.out.conv", x)
    if x.shape[1] != h or x.shape[2] != w:
        x = _crop(x, h, w)
    return x


def _crop(x: T.Tensor, h, w) -> T.Tensor:
    full = x.data

    def bw(g):
        pad = np.zeros_like(full)
        pad[:, :h, :w] = g
        T._accumulate(x, pad)

    return T._node(np.ascontiguousarray(full[:, :h, :w]), (x,), bw)


def predict_batch(model, rgb, s1, s2, mode="train", update_stats=True):
    """(prediction tensor = S1 + residual, residual tensor), both (N, H, W, 1)."""
    residual = forward(model, rgb, s1, s2, mode, update_stats)
    s1_t = T.Tensor(np.asarray(s1, dtype=model.dtype)[..., None])
    return T.add(s1_t, residual), residual


def densify(model: D3Model, image: RgbImage, sparse: SparseInput, mode: str = "eval") -> DepthMap:
    """Dense depth = S1 + network residual, clamped to >= 1 mm."""
    require_same_shape(image=image, sparse=sparse)
    residual = forward(
        model, image.channels[None], sparse.s1[None], sparse.s2[None], mode, update_stats=(mode == "train")
    )
    pred = sparse.s1 + residual.data[0, :, :, 0].astype(np.float64)
    return DepthMap(np.maximum(pred, MIN_DEPTH))


def baseline_nn_fill(sparse: SparseInput) -> DepthMap:
    """The nearest-neighbour fill baseline: S1 itself."""
    return DepthMap(sparse.s1)
