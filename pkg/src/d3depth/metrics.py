"""Depth evaluation metrics over pixels with valid ground truth.

All sums are accumulated in float64. The delta measure uses a strict
comparison: a pixel counts toward delta_i when max(y/p, p/y) < 1.25**i.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DepthMap
from .exceptions import EvaluationError

DEFAULT_DELTAS = (1.0, 2.0, 3.0)


def delta_threshold(i: float) -> float:
    return 1.25 ** float(i)


@dataclass(frozen=True)
class MetricsReport:
    """RMSE in meters, MRE and deltas in percent."""

    rmse: float
    mre: float
    deltas: tuple = field(default_factory=tuple)   # ((i, percent), ...)
    valid_pixels: int = 0
    total_pixels: int = 0

    def delta(self, i: float) -> float:
        for exp, value in self.deltas:
            if exp == i:
                return value
        raise KeyError(f"delta exponent {i} was not computed")


def _as_array(m):
    return m.values if isinstance(m, DepthMap) else np.asarray(m, dtype=np.float64)


def compute_metrics(pred, gt, delta_exponents=DEFAULT_DELTAS) -> MetricsReport:
    """Metrics of ``pred`` against ``gt`` over pixels where gt > 0."""
    p = _as_array(pred).astype(np.float64, copy=False)
    y = _as_array(gt).astype(np.float64, copy=False)
    if p.shape != y.shape:
        raise EvaluationError(f"pred shape {p.shape} differs from gt shape {y.shape}")
    valid = y > 0
    n = int(valid.sum())
    if n == 0:
        raise EvaluationError("ground truth has no valid pixel")
    bad = valid & ~(p > 0)
    if bad.any():
        idx = np.argwhere(bad)[0]
        where = f"(x={idx[-1]}, y={idx[-2]})" if len(idx) >= 2 else f"index {idx[0]}"
        raise EvaluationError(f"nonpositive prediction {p[tuple(idx)]} at valid pixel {where}")
    pv, yv = p[valid], y[valid]
    diff = pv - yv
    rmse = math.sqrt(float(np.sum(diff * diff)) / n)
    mre = 100.0 * float(np.sum(np.abs(diff) / yv)) / n
    ratio = np.maximum(yv / pv, pv / yv)
    deltas = tuple(
        (float(i), 100.0 * int(np.count_nonzero(ratio < delta_threshold(i))) / n) for i in delta_exponents
    )
    return MetricsReport(rmse, mre, deltas, n, int(y.size))


def pooled_metrics(pairs, delta_exponents=DEFAULT_DELTAS) -> MetricsReport:
    """One dataset-level report over all valid pixels of the (pred, gt) pairs."""
    preds, gts = zip(*[(_as_array(p).ravel(), _as_array(g).ravel()) for p, g in pairs])
    return compute_metrics(np.concatenate(preds), np.concatenate(gts), delta_exponents)


CSV_HEADER = ["model", "sparsity_pct", "rmse_m", "mre_pct", "delta1", "delta2", "delta3"]


def _g6(x: float) -> str:
    return f"{x:.6g}"


def metrics_row(model: str, sparsity_pct: float, report: MetricsReport, with_delta01: bool = False) -> list[str]:
    row = [model, _g6(sparsity_pct), _g6(report.rmse), _g6(report.mre)]
    row += [_g6(report.delta(i)) for i in (1.0, 2.0, 3.0)]
    if with_delta01:
        row.append(_g6(report.delta(0.1)))
    return row


def write_metrics_csv(path, rows, with_delta01: bool = False) -> None:
    """``rows`` are (model, sparsity_pct, MetricsReport) triples."""
    header = CSV_HEADER + (["delta0.1"] if with_delta01 else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for model, pct, report in rows:
            writer.writerow(metrics_row(model, pct, report, with_delta01))


def mre_by_depth_bin(pred, gt, bin_width: float = 0.5):
    """(lower, upper, count, mre_pct) for each nonempty gt-depth bin."""
    p, y = _as_array(pred).ravel(), _as_array(gt).ravel()
    valid = y > 0
    p, y = p[valid], y[valid]
    idx = np.floor(y / bin_width).astype(np.int64)
    rel = np.abs(p - y) / y
    out = []
    for b in np.unique(idx):
        sel = idx == b
        out.append((b * bin_width, (b + 1) * bin_width, int(sel.sum()), 100.0 * float(rel[sel].mean())))
    return out


def write_depth_bin_csv(path, bins) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["depth_lo_m", "depth_hi_m", "count", "mre_pct"])
        for lo, hi, count, mre in bins:
            writer.writerow([_g6(lo), _g6(hi), count, _g6(mre)])
