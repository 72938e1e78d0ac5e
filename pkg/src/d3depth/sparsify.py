"""Sparse-input construction: snapping, nearest-site assignment, S1 and S2.

The distance transform is the exact two-pass lower-envelope algorithm of
Felzenszwalb and Huttenlocher, computed in integer arithmetic so that every
squared distance is exact. Envelope breakpoints are kept as fractions and
compared by cross-multiplication, which lets ties be resolved exactly:
among equidistant sites the one first in row-major order (smallest y, then
smallest x) wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import DepthMap, PatternMask, SparseInput, require_same_shape
from .exceptions import InputError, ParameterError, PreconditionError


@dataclass(frozen=True, eq=False)
class SiteAssignment:
    """Nearest mask point of every pixel.

    ``nearest_site`` is (H, W, 2) holding (x, y); ``squared`` is the exact
    integer squared distance and ``distance`` its square root.
    """

    nearest_site: np.ndarray
    squared: np.ndarray

    @property
    def distance(self) -> np.ndarray:
        return np.sqrt(self.squared.astype(np.float64))


@njit(cache=True)
def _column_pass(bits, col_row, col_d):
    """Nearest set row in each column (smaller row on ties); -1 if none."""
    h, w = bits.shape
    for x in range(w):
        last = -1
        for y in range(h):
            if bits[y, x]:
                last = y
            col_row[y, x] = last
        nxt = -1
        for y in range(h - 1, -1, -1):
            if bits[y, x]:
                nxt = y
            best = col_row[y, x]
            if nxt >= 0 and (best < 0 or nxt - y < y - best):
                best = nxt
            col_row[y, x] = best
            col_d[y, x] = (y - best) if best >= 0 else -1


@njit(cache=True)
def _edt(bits):
    h, w = bits.shape
    col_row = np.empty((h, w), np.int64)
    col_d = np.empty((h, w), np.int64)
    _column_pass(bits, col_row, col_d)

    site_x = np.empty((h, w), np.int64)
    site_y = np.empty((h, w), np.int64)
    sq = np.empty((h, w), np.int64)

    cols = np.empty(w, np.int64)
    ncols = 0
    for x in range(w):
        if col_row[0, x] >= 0:
            cols[ncols] = x
            ncols += 1

    v = np.empty(w, np.int64)        # envelope parabola apexes (columns)
    zn = np.empty(w + 1, np.int64)   # breakpoint numerators
    zd = np.empty(w + 1, np.int64)   # breakpoint denominators (> 0)
    zinf = np.empty(w + 1, np.int64)  # -1: -inf, 1: +inf, 0: finite
    f = np.empty(w, np.int64)

    for y in range(h):
        for i in range(ncols):
            x = cols[i]
            d = col_d[y, x]
            f[x] = d * d
        # lower envelope; a parabola is dropped only if strictly dominated,
        # so equal-valued neighbours survive for the tie-break scan
        k = 0
        v[0] = cols[0]
        zinf[0] = -1
        zinf[1] = 1
        for i in range(1, ncols):
            q = cols[i]
            while True:
                p = v[k]
                num = (f[q] + q * q) - (f[p] + p * p)
                den = 2 * (q - p)
                if zinf[k] == -1:
                    break
                if num * zd[k] < zn[k] * den:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            zn[k] = num
            zd[k] = den
            zinf[k] = 0
            zinf[k + 1] = 1
        k = 0
        for x in range(w):
            while zinf[k + 1] == 0 and zn[k + 1] < x * zd[k + 1]:
                k += 1
            p = v[k]
            best = (x - p) * (x - p) + f[p]
            bx = p
            by = col_row[y, p]
            # equal-valued parabolas are contiguous in the envelope
            j = k - 1
            while j >= 0:
                pj = v[j]
                dj = (x - pj) * (x - pj) + f[pj]
                if dj != best:
                    break
                yj = col_row[y, pj]
                if yj < by or (yj == by and pj < bx):
                    bx, by = pj, yj
                j -= 1
            j = k + 1
            while j < ncols and zinf[j] == 0:
                pj = v[j]
                dj = (x - pj) * (x - pj) + f[pj]
                if dj != best:
                    break
                yj = col_row[y, pj]
                if yj < by or (yj == by and pj < bx):
                    bx, by = pj, yj
                j += 1
            site_x[y, x] = bx
            site_y[y, x] = by
            sq[y, x] = best
    return site_x, site_y, sq


def _assign(bits: np.ndarray) -> SiteAssignment:
    sx, sy, sq = _edt(np.ascontiguousarray(bits, dtype=np.bool_))
    return SiteAssignment(np.stack([sx, sy], axis=-1), sq)


def distance_transform(mask: PatternMask) -> SiteAssignment:
    """Exact Euclidean nearest-site assignment for every pixel."""
    if mask.count == 0:
        raise InputError("distance transform needs at least one set bit, mask is empty")
    return _assign(mask.bits)


def snap_mask_to_valid(mask: PatternMask, depth: DepthMap) -> PatternMask:
    """Move bits on invalid depth to the nearest valid pixel; collisions merge."""
    require_same_shape(mask=mask, depth=depth)
    valid = depth.valid
    if not valid.any():
        raise InputError("depth map has no valid pixel to snap sample points onto")
    bits = mask.bits & valid
    stray = mask.bits & ~valid
    if stray.any():
        nearest = _assign(valid).nearest_site
        ys, xs = np.nonzero(stray)
        tx, ty = nearest[ys, xs, 0], nearest[ys, xs, 1]
        bits[ty, tx] = True
    return PatternMask(bits)


def build_sparse_input(depth: DepthMap, mask: PatternMask, sqrt_distance: bool = True) -> SparseInput:
    """S1 = depth at the nearest mask point; S2 = sqrt of the distance to it.

    With ``sqrt_distance=False`` S2 is the plain Euclidean distance.
    """
    require_same_shape(depth=depth, mask=mask)
    bad = mask.bits & ~depth.valid
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise PreconditionError(f"mask point ({x}, {y}) lies on invalid depth; snap the mask first")
    sites = distance_transform(mask)
    nx, ny = sites.nearest_site[..., 0], sites.nearest_site[..., 1]
    s1 = depth.values[ny, nx]
    dist = sites.distance
    s2 = np.sqrt(dist) if sqrt_distance else dist
    return SparseInput(s1, s2)


def point_samples(depth: DepthMap, mask: PatternMask) -> DepthMap:
    """Depth at mask points, 0 elsewhere."""
    require_same_shape(depth=depth, mask=mask)
    return DepthMap(np.where(mask.bits, depth.values, 0.0))


def patch_average_sample(depth: DepthMap, mask: PatternMask, patch: int) -> DepthMap:
    """Replace each point sample by the mean valid depth in a patch x patch window.

    The window is clipped at the borders and invalid pixels are excluded.
    Returns a map that is 0 away from the mask points.
    """
    if not isinstance(patch, (int, np.integer)) or patch < 1 or patch % 2 == 0:
        raise ParameterError(f"patch size must be a positive odd integer, got {patch!r}")
    require_same_shape(depth=depth, mask=mask)
    if patch == 1:
        return point_samples(depth, mask)
    bad = mask.bits & ~depth.valid
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise PreconditionError(f"mask point ({x}, {y}) lies on invalid depth; snap the mask first")
    r = patch // 2
    h, w = depth.shape
    vals = depth.values
    out = np.zeros((h, w))
    for x, y in mask.points():
        win = vals[max(0, y - r):min(h, y + r + 1), max(0, x - r):min(w, x + r + 1)]
        good = win[win > 0]
        out[y, x] = good.sum() / good.size
    return DepthMap(out)

