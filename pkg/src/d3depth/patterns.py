"""Sparse sampling patterns and sparsity curricula.

Three pattern families are provided: a regular grid (equal spacing ``a`` in
both axes, one sample centred in each full ``a x a`` cell), uniformly random
points, and content-dependent interest points (Harris corners). Schedules
decide how many points to sample at a given training step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .core import PatternMask, RgbImage
from .exceptions import ParameterError

HARRIS_K = 0.04
# multi-density training range, as pixel fractions (0.065% .. 0.98%)
RANDOM_DENSITY_RANGE = (0.00065, 0.0098)


class PatternKind(str, Enum):
    GRID = "grid"
    RANDOM = "random"
    INTEREST = "interest"


class ScheduleKind(str, Enum):
    STATIC = "static"
    SLOW_DECAY = "slow_decay"
    RANDOM_DENSITY = "random_density"


@dataclass(frozen=True)
class PatternSpec:
    """How to draw a mask. For grids ``target_count`` is derived from the factor."""

    kind: PatternKind
    target_count: int | None = None
    downsample_factor: int | None = None
    seed: int = 0

    def __post_init__(self):
        kind = PatternKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is PatternKind.GRID:
            if self.downsample_factor is None or self.downsample_factor < 1:
                raise ParameterError("grid patterns need downsample_factor >= 1")
        elif self.target_count is None or self.target_count < 1:
            raise ParameterError(f"{kind.value} patterns need target_count >= 1")

    def count_for(self, h: int, w: int) -> int:
        if self.kind is PatternKind.GRID:
            return nominal_grid_count(h, w, self.downsample_factor)
        return self.target_count


@dataclass(frozen=True)
class SparsitySchedule:
    """Number of sample points as a function of the training step.

    ``range`` bounds the pixel fraction for ``RANDOM_DENSITY``.
    """

    kind: ScheduleKind = ScheduleKind.STATIC
    base_count: int = 48
    total_steps: int = 80000
    range: tuple[float, float] = RANDOM_DENSITY_RANGE

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.base_count < 1:
            raise ParameterError(f"base_count must be >= 1, got {self.base_count}")
        if self.total_steps < 0:
            raise ParameterError(f"total_steps must be >= 0, got {self.total_steps}")
        lo, hi = self.range
        if not 0 < lo <= hi <= 1:
            raise ParameterError(f"range must satisfy 0 < min <= max <= 1, got {self.range}")


def nominal_grid_count(h: int, w: int, a: int) -> int:
    """The nominal sample count floor(H*W / A^2) quoted for an A x A grid."""
    return (h * w) // (a * a)


def factor_for_count(h: int, w: int, count: int) -> int:
    """Grid spacing whose nominal count is closest to ``count``."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    a = int(round(math.sqrt(h * w / count)))
    return min(max(a, 1), min(h, w))


def count_for_fraction(h: int, w: int, fraction: float) -> int:
    return max(1, int(round(fraction * h * w)))


def grid_pattern(h: int, w: int, a: int) -> PatternMask:
    """Set bits at (a//2 + j*a, a//2 + i*a) for every in-bounds i, j."""
    if not 1 <= a <= min(h, w):
        raise ParameterError(f"grid factor a={a} must lie in [1, min(h, w)={min(h, w)}]")
    bits = np.zeros((h, w), dtype=bool)
    bits[a // 2::a, a // 2::a] = True
    return PatternMask(bits)


def _random_order(h, w, seed):
    return np.random.default_rng(seed).permutation(h * w)


def random_pattern(h: int, w: int, n: int, seed: int = 0) -> PatternMask:
    """Exactly ``n`` distinct pixels drawn uniformly without replacement."""
    if not 1 <= n <= h * w:
        raise ParameterError(f"n={n} must lie in [1, h*w={h * w}]")
    bits = np.zeros(h * w, dtype=bool)
    bits[_random_order(h, w, seed)[:n]] = True
    return PatternMask(bits.reshape(h, w))


def harris_response(gray: np.ndarray, k: float = HARRIS_K) -> np.ndarray:
    """Harris measure det(M) - k trace(M)^2 with 3x3 Sobel gradients.

    The structure tensor M is summed over a 3x3 window; borders replicate.
    """
    g = np.asarray(gray, dtype=np.float64)
    ix = ndimage.sobel(g, axis=1, mode="nearest")
    iy = ndimage.sobel(g, axis=0, mode="nearest")
    box = dict(size=3, mode="nearest")
    sxx = ndimage.uniform_filter(ix * ix, **box) * 9
    syy = ndimage.uniform_filter(iy * iy, **box) * 9
    sxy = ndimage.uniform_filter(ix * iy, **box) * 9
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris_corners(gray: np.ndarray, k: float = HARRIS_K) -> np.ndarray:
    """Corner pixels as (n, 2) (x, y), strongest first.

    A corner is a positive response that is the maximum of its 3x3
    neighbourhood; among equal neighbouring maxima the first in row-major
    order wins. Ties in strength are ordered row-major.
    """
    r = harris_response(gray, k)
    peak = r.max() if r.size else 0.0
    if not peak > 0:
        return np.zeros((0, 2), dtype=np.int64)
    # uniform_filter leaves ~1e-16 relative noise on flat regions
    floor = peak * 1e-9
    local_max = ndimage.maximum_filter(r, size=3, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((r == local_max) & (r > floor))
    h, w = r.shape
    keep = []
    taken = np.zeros_like(r, dtype=bool)
    for y, x in zip(ys, xs):  # row-major order
        y0, y1, x0, x1 = max(0, y - 1), min(h, y + 2), max(0, x - 1), min(w, x + 2)
        if taken[y0:y1, x0:x1].any():
            continue
        taken[y, x] = True
        keep.append((x, y))
    if not keep:
        return np.zeros((0, 2), dtype=np.int64)
    pts = np.array(keep, dtype=np.int64)
    strength = r[pts[:, 1], pts[:, 0]]
    order = np.lexsort((pts[:, 0], pts[:, 1], -strength))
    return pts[order]


def interest_pattern(image: RgbImage, n: int, seed: int = 0) -> PatternMask:
    """The ``n`` strongest Harris corners, topped up with random points."""
    h, w = image.shape
    if not 1 <= n <= h * w:
        raise ParameterError(f"n={n} must lie in [1, h*w={h * w}]")
    corners = harris_corners(image.gray())[:n]
    bits = np.zeros((h, w), dtype=bool)
    bits[corners[:, 1], corners[:, 0]] = True
    missing = n - len(corners)
    if missing:
        flat = bits.reshape(-1)
        for idx in _random_order(h, w, seed):
            if not flat[idx]:
                flat[idx] = True
                missing -= 1
                if missing == 0:
                    break
    return PatternMask(bits)


def make_pattern(spec: PatternSpec, h: int, w: int, image: RgbImage | None = None) -> PatternMask:
    if spec.kind is PatternKind.GRID:
        return grid_pattern(h, w, spec.downsample_factor)
    if spec.kind is PatternKind.RANDOM:
        return random_pattern(h, w, spec.target_count, spec.seed)
    if image is None:
        raise ParameterError("interest patterns need the RGB image")
    return interest_pattern(image, spec.target_count, spec.seed)


def slow_decay_count(base_count: int, t: int) -> int:
    """floor(5 N exp(-0.0003 t) + N)."""
    return int(math.floor(5 * base_count * math.exp(-0.0003 * t) + base_count))


def schedule_count(
    sched: SparsitySchedule, t: int, seed: int = 0, n_pixels: int | None = None, image: int | None = None
) -> int:
    """Number of sample points at step ``t``.

    ``RANDOM_DENSITY`` draws a pixel fraction uniformly from ``sched.range``
    (reproducibly per ``(seed, t)``, or per ``(seed, t, image)`` when
    ``image`` is given) and needs ``n_pixels``.
    """
    if not 0 <= t <= sched.total_steps:
        raise ParameterError(f"step t={t} outside [0, total_steps={sched.total_steps}]")
    if sched.kind is ScheduleKind.STATIC:
        return sched.base_count
    if sched.kind is ScheduleKind.SLOW_DECAY:
        return slow_decay_count(sched.base_count, t)
    if n_pixels is None:
        raise ParameterError("random-density schedules need n_pixels")
    fraction = schedule_fraction(sched, t, seed, image)
    return max(1, int(round(fraction * n_pixels)))


def schedule_fraction(sched: SparsitySchedule, t: int, seed: int = 0, image: int | None = None) -> float:
    lo, hi = sched.range
    key = [seed, t, 0x5D] if image is None else [seed, t, 0x5D, image]
    return float(np.random.default_rng(key).uniform(lo, hi))
