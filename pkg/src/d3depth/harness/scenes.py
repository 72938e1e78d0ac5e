"""Procedural RGB-D scenes and scene sources.

A scene is a tilted background plane in the far half of the depth range
with 3 to 8 rectangles and ellipses in front of it. Every layer is a plane
with its own albedo, so colour edges fall exactly on depth discontinuities.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from ..core import DepthMap, RgbImage, read_depth, read_float_map, read_rgb
from ..exceptions import FormatError, InputError, ParameterError

MIXED_MAX_DEPTH = 10.0
NOISE_STD = 0.01
# minimum per-channel albedo contrast between layers
ALBEDO_CONTRAST = 0.25


@dataclass(frozen=True)
class SceneSpec:
    height: int = 96
    width: int = 128
    depth_range: tuple[float, float] = (1.0, 10.0)
    object_count_range: tuple[int, int] = (3, 8)
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ParameterError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ParameterError(f"depth_range must satisfy 0 < min < max, got {self.depth_range}")
        a, b = self.object_count_range
        if not 0 <= a <= b:
            raise ParameterError(f"object_count_range must satisfy 0 <= min <= max, got {self.object_count_range}")


PRESETS = {"indoor": (1.0, 10.0), "outdoor": (1.0, 80.0)}


def preset_spec(preset: str, seed: int = 0, height: int = 96, width: int = 128) -> SceneSpec:
    try:
        depth_range = PRESETS[preset]
    except KeyError:
        raise ParameterError(f"unknown scene preset {preset!r}; choose from {sorted(PRESETS)}") from None
    return SceneSpec(height, width, depth_range, seed=seed)


def _albedo(rng, taken):
    while True:
        c = rng.uniform(0.1, 0.95, 3)
        if all(np.max(np.abs(c - t)) >= ALBEDO_CONTRAST for t in taken):
            return c


def _plane(rng, h, w, lo, hi, tilt):
    """Depth plane with value range inside [lo, hi] and random tilt direction."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx / max(w - 1, 1)) * math.cos(tilt[0]) + (yy / max(h - 1, 1)) * math.sin(tilt[0])
    u = (u - u.min()) / max(u.max() - u.min(), 1e-12)
    span = tilt[1] * (hi - lo)
    base = rng.uniform(lo, hi - span)
    return base + span * u


def generate_scene(spec: SceneSpec) -> tuple[RgbImage, DepthMap]:
    """A deterministic (RGB, depth) pair; every pixel has valid depth."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    lo, hi = spec.depth_range
    mid = lo + 0.5 * (hi - lo)

    depth = _plane(rng, h, w, mid, hi, (rng.uniform(0, 2 * math.pi), rng.uniform(0.1, 0.5)))
    label = np.zeros((h, w), dtype=np.int64)
    albedos = [_albedo(rng, [])]
    slopes = [np.hypot(*np.gradient(depth)).mean()]

    n_obj = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))
    objects = []
    for _ in range(n_obj):
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
        plane = _plane(rng, h, w, lo, mid, (rng.uniform(0, 2 * math.pi), rng.uniform(0.0, 0.1)))
        objects.append((float(plane.mean()), shape, cy, cx, ry, rx, plane))
    # far to near, so nearer objects occlude
    objects.sort(key=lambda o: -o[0])
    yy, xx = np.mgrid[0:h, 0:w]
    for i, (_, shape, cy, cx, ry, rx, plane) in enumerate(objects, start=1):
        if shape == "rect":
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        depth = np.where(inside, plane, depth)
        label[inside] = i
        albedos.append(_albedo(rng, albedos))
        slopes.append(np.hypot(*np.gradient(plane)).mean())

    albedo = np.asarray(albedos)[label]
    slope = np.asarray(slopes)[label]
    # slanted surfaces are darker, nearer surfaces brighter
    shade = 0.75 + 0.25 * np.exp(-20.0 * slope / (hi - lo) * max(h, w))
    tint = 0.8 + 0.2 * (hi - depth) / (hi - lo)
    rgb = albedo * (shade * tint)[..., None]
    rgb = np.clip(rgb + rng.normal(0.0, NOISE_STD, rgb.shape), 0.0, 1.0)
    return RgbImage(rgb), DepthMap(np.clip(depth, lo, hi))


def scale_for_mixed(depth: DepthMap, max_depth: float = MIXED_MAX_DEPTH) -> tuple[DepthMap, float]:
    """Scale depth so its maximum is at most ``max_depth``; returns (map, s)."""
    valid = depth.valid
    if not valid.any():
        raise InputError("cannot scale a depth map with no valid pixel")
    s = min(1.0, max_depth / float(depth.values[valid].max()))
    if s == 1.0:
        return depth, 1.0
    return DepthMap(depth.values * s), s


def unscale(depth: DepthMap, s: float) -> DepthMap:
    return depth if s == 1.0 else DepthMap(depth.values / s)


# ---------------------------------------------------------------------------
# sources


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


class SyntheticSource:
    """``count`` procedural scenes from one preset, generated on first use."""

    def __init__(self, count: int, preset: str = "indoor", seed: int = 0, height: int = 96, width: int = 128):
        if count < 1:
            raise ParameterError(f"scene count must be >= 1, got {count}")
        self.count, self.preset, self.seed = count, preset, seed
        self.height, self.width = height, width
        preset_spec(preset, 0, height, width)
        self._cache: dict[int, tuple[RgbImage, DepthMap]] = {}

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        if not 0 <= i < self.count:
            raise IndexError(i)
        if i not in self._cache:
            spec = preset_spec(self.preset, scene_seed(self.seed, i), self.height, self.width)
            self._cache[i] = generate_scene(spec)
        return self._cache[i]


class DirectorySource:
    """Paired ``NAME.ppm`` (RGB) and depth files, in sorted name order.

    Depth is ``NAME.pfm`` (meters) when present, else ``NAME.pgm`` (mm).
    """

    def __init__(self, path):
        if not os.path.isdir(path):
            raise InputError(f"data directory {path} does not exist")
        self.pairs = []
        for stem in sorted(f[:-4] for f in os.listdir(path) if f.endswith(".ppm")):
            for ext in (".pfm", ".pgm"):
                depth_path = os.path.join(path, stem + ext)
                if os.path.exists(depth_path):
                    self.pairs.append((os.path.join(path, stem + ".ppm"), depth_path))
                    break
        if not self.pairs:
            raise InputError(f"data directory {path} holds no NAME.ppm / NAME.pgm pairs")
        self._cache = {}

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        if i not in self._cache:
            rgb_path, depth_path = self.pairs[i]
            rgb = read_rgb(rgb_path)
            if depth_path.endswith(".pfm"):
                depth = DepthMap(read_float_map(depth_path).astype(np.float64))
            else:
                depth = read_depth(depth_path)
            if rgb.shape != depth.shape:
                raise FormatError(f"{rgb_path} and {depth_path} differ in size")
            self._cache[i] = (rgb, depth)
        return self._cache[i]


class MixedSource:
    """Two sources drawn alternately, for 50/50 indoor/outdoor batches."""

    def __init__(self, first, second):
        self.domains = (first, second)

    def __len__(self):
        return 2 * min(len(d) for d in self.domains)

    def __getitem__(self, i):
        return self.domains[i % 2][i // 2]
