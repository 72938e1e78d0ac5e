"""Sensor-error models applied to the sparse samples.

Every function takes an explicit seed (an int or a sequence of ints, as
accepted by ``numpy.random.default_rng``) and never touches ground truth.
Sparse samples are carried as a DepthMap that is nonzero only at mask points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import DepthMap, PatternMask, require_same_shape
from .exceptions import ParameterError
from .sparsify import _assign, point_samples

logger = logging.getLogger(__name__)

MIN_DEPTH = 0.001


class PerturbKind(str, Enum):
    DROPOUT = "dropout"
    GAUSSIAN = "gaussian"
    SHIFT_CONST = "shift_const"
    SHIFT_RANDOM = "shift_random"
    ROT_CONST = "rot_const"
    ROT_RANDOM = "rot_random"


MISREGISTRATION_KINDS = (
    PerturbKind.SHIFT_CONST,
    PerturbKind.SHIFT_RANDOM,
    PerturbKind.ROT_CONST,
    PerturbKind.ROT_RANDOM,
)


@dataclass(frozen=True)
class PerturbSpec:
    """One error model.

    ``magnitude`` is the dropout probability, the relative noise sigma
    (0.03 = 3%), a shift in pixels or a rotation in degrees. With
    ``additive`` the Gaussian sigma is in meters instead.
    """

    kind: PerturbKind
    magnitude: float
    seed: int = 0
    additive: bool = False

    def __post_init__(self):
        kind = PerturbKind(self.kind)
        object.__setattr__(self, "kind", kind)
        m = float(self.magnitude)
        if not math.isfinite(m) or m < 0:
            raise ParameterError(f"perturbation magnitude must be finite and >= 0, got {self.magnitude}")
        if kind is PerturbKind.DROPOUT and m >= 1:
            raise ParameterError(f"dropout probability must be < 1, got {m}")
        object.__setattr__(self, "magnitude", m)


def apply_dropout(mask: PatternMask, p: float, seed=0) -> tuple[PatternMask, bool]:
    """Clear each set bit independently with probability ``p``.

    If every bit would be cleared, the first set bit in row-major order is
    kept and the returned flag is True.
    """
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    bits = mask.bits.copy()
    ys, xs = np.nonzero(bits)
    if p == 0 or len(ys) == 0:
        return PatternMask(bits), False
    drop = np.random.default_rng(seed).random(len(ys)) < p
    bits[ys[drop], xs[drop]] = False
    if not bits.any():
        bits[ys[0], xs[0]] = True
        logger.warning("dropout cleared every sample; kept the first one at (%d, %d)", xs[0], ys[0])
        return PatternMask(bits), True
    return PatternMask(bits), False


def noisy_values(d, eps, additive: bool = False):
    """d (1 + eps), or d + eps when additive, clamped to >= 1 mm."""
    d = np.asarray(d, dtype=np.float64)
    out = d + eps if additive else d * (1.0 + np.asarray(eps, dtype=np.float64))
    return np.maximum(out, MIN_DEPTH)


def apply_gaussian(samples: DepthMap, sigma: float, seed=0, additive: bool = False) -> DepthMap:
    """Gaussian error on every nonzero sample, drawn in row-major order."""
    if not sigma >= 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return samples
    v = samples.values.copy()
    at = v > 0
    eps = np.random.default_rng(seed).normal(0.0, sigma, int(at.sum()))
    v[at] = noisy_values(v[at], eps, additive)
    return DepthMap(v)


def _round_half_up(a):
    return np.floor(np.asarray(a, dtype=np.float64) + 0.5).astype(np.int64)


def misregistration_params(kind: PerturbKind, magnitude: float, seed=0, direction=None):
    """Per-image (dx, dy) shift in pixels or rotation angle in degrees.

    ``direction`` fixes the shift angle (radians, 0 = +x) or the rotation sign.
    """
    kind = PerturbKind(kind)
    rng = np.random.default_rng(seed)
    if kind in (PerturbKind.SHIFT_CONST, PerturbKind.SHIFT_RANDOM):
        m = magnitude if kind is PerturbKind.SHIFT_CONST else rng.uniform(0.0, magnitude)
        phi = rng.uniform(0.0, 2 * math.pi) if direction is None else float(direction)
        return m * math.cos(phi), m * math.sin(phi)
    if kind in (PerturbKind.ROT_CONST, PerturbKind.ROT_RANDOM):
        m = magnitude if kind is PerturbKind.ROT_CONST else rng.uniform(0.0, magnitude)
        sign = (1.0 if rng.random() < 0.5 else -1.0) if direction is None else math.copysign(1.0, direction)
        return sign * m
    raise ParameterError(f"{kind.value} is not a misregistration kind")


def misregistered_coords(points, shape, kind, params):
    """Nearest-pixel read locations (x', y') for (n, 2) points, clamped to the image."""
    h, w = shape
    pts = np.asarray(points, dtype=np.float64)
    if kind in (PerturbKind.SHIFT_CONST, PerturbKind.SHIFT_RANDOM):
        dx, dy = params
        xr, yr = pts[:, 0] + dx, pts[:, 1] + dy
    else:
        theta = math.radians(params)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        c, s = math.cos(theta), math.sin(theta)
        ux, uy = pts[:, 0] - cx, pts[:, 1] - cy
        xr, yr = c * ux - s * uy + cx, s * ux + c * uy + cy
    xr = np.clip(_round_half_up(xr), 0, w - 1)
    yr = np.clip(_round_half_up(yr), 0, h - 1)
    return xr, yr


def apply_misregistration(
    depth: DepthMap, mask: PatternMask, kind, magnitude: float, seed=0, direction=None
) -> DepthMap:
    """Sample depth at displaced locations; the result is nonzero only at mask points.

    Each mask point r reports the depth at r + delta (shift) or at r rotated
    about the image center, with nearest-pixel lookup clamped to the image.
    An invalid read location falls back to its nearest valid pixel.
    """
    kind = PerturbKind(kind)
    if not magnitude >= 0:
        raise ParameterError(f"misregistration magnitude must be >= 0, got {magnitude}")
    require_same_shape(depth=depth, mask=mask)
    if magnitude == 0:
        return point_samples(depth, mask)
    params = misregistration_params(kind, magnitude, seed, direction)
    pts = mask.points()
    xr, yr = misregistered_coords(pts, depth.shape, kind, params)
    vals = depth.values[yr, xr]
    invalid = vals <= 0
    if invalid.any():
        valid = depth.valid
        if not valid.any():
            raise ParameterError("depth map has no valid pixel to read from")
        near = _assign(valid).nearest_site
        fx, fy = near[yr[invalid], xr[invalid], 0], near[yr[invalid], xr[invalid], 1]
        vals[invalid] = depth.values[fy, fx]
    out = np.zeros(depth.shape)
    out[pts[:, 1], pts[:, 0]] = vals
    return DepthMap(out)


def perturb_samples(spec: PerturbSpec, depth: DepthMap, mask: PatternMask, seed=None):
    """Apply ``spec`` to a snapped mask over ``depth``.

    Returns (mask, samples, fallback flag). ``seed`` overrides ``spec.seed``
    so callers can draw fresh errors per image.
    """
    seed = spec.seed if seed is None else seed
    if spec.kind is PerturbKind.DROPOUT:
        mask, flag = apply_dropout(mask, spec.magnitude, seed)
        return mask, point_samples(depth, mask), flag
    if spec.kind is PerturbKind.GAUSSIAN:
        return mask, apply_gaussian(point_samples(depth, mask), spec.magnitude, seed, spec.additive), False
    return mask, apply_misregistration(depth, mask, spec.kind, spec.magnitude, seed), False
