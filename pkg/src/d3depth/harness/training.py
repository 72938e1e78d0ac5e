"""Training loop, evaluation sweeps and validation loss.

Every random choice in a training step is drawn from generators seeded by
``(cfg.seed, step, ...)``, so a run can be resumed at any step and two runs
with the same inputs produce identical logs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import tensor as T
from ..core import DepthMap, PatternMask, RgbImage
from ..d3net import MIN_DEPTH, D3Model, forward, predict_batch
from ..exceptions import NumericError, ParameterError
from ..metrics import DEFAULT_DELTAS, MetricsReport, pooled_metrics
from ..patterns import (
    PatternKind,
    ScheduleKind,
    SparsitySchedule,
    count_for_fraction,
    factor_for_count,
    grid_pattern,
    interest_pattern,
    random_pattern,
    schedule_count,
)
from ..perturb import PerturbSpec, perturb_samples
from ..sparsify import build_sparse_input, patch_average_sample, point_samples, snap_mask_to_valid
from .scenes import MixedSource, scale_for_mixed

logger = logging.getLogger(__name__)

LOG_HEADER = ["step", "loss", "sparsity_pct", "lr"]


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation and data settings.

    ``pattern`` picks the mask family; grid spacing follows the scheduled
    count. ``patch`` > 1 feeds patch-averaged samples instead of point
    samples. ``crop`` is (height, width) or None. With
    ``density_per_image`` a random-density schedule draws one density per
    image rather than one per step, so batchnorm statistics seen in training
    mix densities the way the running statistics used at evaluation do.
    """

    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.2
    lr_decay_every: int = 25000
    total_steps: int = 80000
    schedule: SparsitySchedule = field(default_factory=SparsitySchedule)
    pattern: PatternKind = PatternKind.GRID
    perturb: PerturbSpec | None = None
    mixed_domain: bool = False
    flip_augment: bool = True
    crop: tuple[int, int] | None = None
    seed: int = 0
    patch: int = 1
    sqrt_distance: bool = True
    density_per_image: bool = True
    log_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "pattern", PatternKind(self.pattern))
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if self.lr_decay_every < 1 or self.log_every < 1:
            raise ParameterError("lr_decay_every and log_every must be >= 1")
        if self.total_steps < 0:
            raise ParameterError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.schedule.total_steps < self.total_steps:
            raise ParameterError(
                f"schedule horizon {self.schedule.total_steps} is shorter than total_steps {self.total_steps}"
            )
        if self.crop is not None and (len(self.crop) != 2 or min(self.crop) < 1):
            raise ParameterError(f"crop must be (height, width) with positive sizes, got {self.crop}")


def desk_train_config(**overrides) -> TrainConfig:
    """2000 steps at 0.39% static grid sampling, unless overridden."""
    steps = overrides.pop("total_steps", 2000)
    schedule = overrides.pop("schedule", SparsitySchedule(ScheduleKind.STATIC, 48, steps))
    return TrainConfig(total_steps=steps, schedule=schedule, **overrides)


def lr_at(cfg: TrainConfig, t: int) -> float:
    return cfg.lr * cfg.lr_decay ** (t // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# sample preparation


def sample_mask(pattern: PatternKind, rgb: RgbImage, count: int, seed=0) -> PatternMask:
    """A mask of about ``count`` points (grids use the nearest spacing)."""
    h, w = rgb.shape
    count = min(max(int(count), 1), h * w)
    if pattern is PatternKind.GRID:
        return grid_pattern(h, w, factor_for_count(h, w, count))
    if pattern is PatternKind.RANDOM:
        return random_pattern(h, w, count, seed)
    return interest_pattern(rgb, count, seed)


def make_sparse(
    rgb: RgbImage,
    depth: DepthMap,
    count: int,
    pattern: PatternKind = PatternKind.GRID,
    seed=0,
    perturb: PerturbSpec | None = None,
    perturb_seed=None,
    patch: int = 1,
    sqrt_distance: bool = True,
):
    """(SparseInput, final mask) for one image, following the full sampling pipeline."""
    mask = snap_mask_to_valid(sample_mask(PatternKind(pattern), rgb, count, seed), depth)
    if perturb is not None:
        mask, samples, _ = perturb_samples(perturb, depth, mask, perturb_seed)
    elif patch > 1:
        samples = patch_average_sample(depth, mask, patch)
    else:
        samples = point_samples(depth, mask)
    return build_sparse_input(samples, mask, sqrt_distance), mask


@dataclass
class Batch:
    rgb: np.ndarray     # (N, H, W, 3)
    s1: np.ndarray      # (N, H, W)
    s2: np.ndarray
    gt: np.ndarray      # (N, H, W), possibly scaled
    count: float        # scheduled sample count, averaged over the batch


def _index(n, seed, k):
    epoch, pos = divmod(k, n)
    return int(np.random.default_rng([seed, epoch, 1]).permutation(n)[pos])


def _pick(data, cfg: TrainConfig, t: int, b: int):
    if cfg.mixed_domain and isinstance(data, MixedSource):
        per = (cfg.batch_size + 1) // 2
        domain = data.domains[b % 2]
        return domain[_index(len(domain), cfg.seed + b % 2, t * per + b // 2)]
    return data[_index(len(data), cfg.seed, t * cfg.batch_size + b)]


def draw_batch(data, cfg: TrainConfig, t: int) -> Batch:
    """The training batch of step ``t``."""
    rng = np.random.default_rng([cfg.seed, t])
    rgbs, s1s, s2s, gts, counts = [], [], [], [], []
    per_image = cfg.density_per_image and cfg.schedule.kind is ScheduleKind.RANDOM_DENSITY
    for b in range(cfg.batch_size):
        rgb, depth = _pick(data, cfg, t, b)
        c, d = rgb.channels, depth.values
        if cfg.crop is not None:
            ch, cw = cfg.crop
            h, w = d.shape
            if ch > h or cw > w:
                raise ParameterError(f"crop {ch}x{cw} exceeds image size {h}x{w}")
            y0, x0 = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
            c, d = c[y0:y0 + ch, x0:x0 + cw], d[y0:y0 + ch, x0:x0 + cw]
        if cfg.flip_augment and rng.random() < 0.5:
            c, d = c[:, ::-1], d[:, ::-1]
        rgb, depth = RgbImage(c), DepthMap(d)
        if cfg.mixed_domain:
            depth, _ = scale_for_mixed(depth)
        h, w = depth.shape
        count = schedule_count(cfg.schedule, t, cfg.seed, n_pixels=h * w, image=b if per_image else None)
        counts.append(count)
        sparse, _ = make_sparse(
            rgb, depth, count, cfg.pattern, [cfg.seed, t, b, 2], cfg.perturb,
            None if cfg.perturb is None else [cfg.perturb.seed, t, b], cfg.patch, cfg.sqrt_distance,
        )
        rgbs.append(rgb.channels)
        s1s.append(sparse.s1)
        s2s.append(sparse.s2)
        gts.append(depth.values)
    return Batch(np.stack(rgbs), np.stack(s1s), np.stack(s2s), np.stack(gts), float(np.mean(counts)))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class LogRecord:
    step: int
    loss: float
    sparsity_pct: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.step), f"{self.loss:.9g}", f"{self.sparsity_pct:.6g}", f"{self.lr:.6g}"]


@dataclass
class TrainLog:
    optimizer: T.Adam
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)   # every step
    counts: list = field(default_factory=list)   # mean scheduled sample count per step

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_HEADER)
            for rec in self.records:
                writer.writerow(rec.row())


def batch_loss(model: D3Model, batch: Batch, mode="train", update_stats=True) -> T.Tensor:
    pred, _ = predict_batch(model, batch.rgb, batch.s1, batch.s2, mode, update_stats)
    gt = batch.gt[..., None]
    return T.l2_loss(pred, gt, gt > 0)


def train(
    model: D3Model,
    data,
    cfg: TrainConfig,
    optimizer: T.Adam | None = None,
    start_step: int = 0,
    end_step: int | None = None,
    log_path=None,
) -> TrainLog:
    """Run steps ``start_step .. end_step - 1`` (default: to ``cfg.total_steps``).

    Pass the optimizer and step restored from a checkpoint to resume.
    """
    if optimizer is None:
        optimizer = T.Adam(model.params)
    end = cfg.total_steps if end_step is None else end_step
    if not 0 <= start_step <= end <= cfg.total_steps:
        raise ParameterError(f"step range [{start_step}, {end}) outside [0, {cfg.total_steps}]")
    log = TrainLog(optimizer)
    try:
        for t in range(start_step, end):
            batch = draw_batch(data, cfg, t)
            loss = batch_loss(model, batch)
            value = float(loss.data)
            lr = lr_at(cfg, t)
            log.losses.append(value)
            log.counts.append(batch.count)
            if not math.isfinite(value):
                tail = ", ".join(f"{v:.6g}" for v in log.losses[-10:])
                raise NumericError(f"non-finite loss at step {t} (lr {lr:.6g}); recent losses: [{tail}]")
            T.backward(loss)
            optimizer.step(lr)
            if t % cfg.log_every == 0:
                pct = 100.0 * batch.count / batch.s1[0].size
                log.records.append(LogRecord(t, value, pct, lr))
                logger.debug("step %d loss %.6g sparsity %.4g%% lr %.3g", t, value, pct, lr)
    finally:
        if log_path is not None:
            log.write_csv(log_path)
    return log


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalRow:
    model: str
    sparsity_pct: float
    report: MetricsReport


def _eval_inputs(data, fraction, pattern, seed, perturb, patch, mixed_domain, sqrt_distance):
    for i in range(len(data)):
        rgb, depth = data[i]
        scaled, s = scale_for_mixed(depth) if mixed_domain else (depth, 1.0)
        count = count_for_fraction(*depth.shape, fraction)
        sparse, _ = make_sparse(
            rgb, scaled, count, pattern, [seed, i, 3], perturb,
            None if perturb is None else [perturb.seed, 1_000_003, i], patch, sqrt_distance,
        )
        yield rgb, depth, sparse, s


def _batched(it, n):
    chunk = []
    for item in it:
        chunk.append(item)
        if len(chunk) == n:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def evaluate(
    model: D3Model,
    data,
    sparsities,
    perturb: PerturbSpec | None = None,
    pattern: PatternKind = PatternKind.GRID,
    patch: int = 1,
    mixed_domain: bool = False,
    seed: int = 0,
    batch_size: int = 8,
    delta_exponents=DEFAULT_DELTAS,
    sqrt_distance: bool = True,
    include_baseline: bool = True,
) -> list[EvalRow]:
    """Dataset-level metrics of the model and the NN-fill baseline.

    ``sparsities`` are pixel fractions (0.0039 = 0.39%). Metrics pool every
    valid ground-truth pixel of the set and are always computed in the
    original depth units.
    """
    rows = []
    for fraction in sparsities:
        if not 0 < fraction <= 1:
            raise ParameterError(f"sparsity must be a pixel fraction in (0, 1], got {fraction}")
        model_pairs, base_pairs = [], []
        stream = _eval_inputs(data, fraction, PatternKind(pattern), seed, perturb, patch, mixed_domain, sqrt_distance)
        for chunk in _batched(stream, batch_size):
            shapes = {c[0].shape for c in chunk}
            groups = [chunk] if len(shapes) == 1 else [[c] for c in chunk]
            for group in groups:
                rgb = np.stack([c[0].channels for c in group])
                s1 = np.stack([c[2].s1 for c in group])
                s2 = np.stack([c[2].s2 for c in group])
                res = forward(model, rgb, s1, s2, mode="eval", update_stats=False).data[..., 0]
                for (_, depth, sparse, s), r in zip(group, res):
                    pred = np.maximum(sparse.s1 + r.astype(np.float64), MIN_DEPTH)
                    model_pairs.append((pred / s, depth.values))
                    base_pairs.append((sparse.s1 / s, depth.values))
        pct = 100.0 * fraction
        rows.append(EvalRow("d3", pct, pooled_metrics(model_pairs, delta_exponents)))
        if include_baseline:
            rows.append(EvalRow("nn_fill", pct, pooled_metrics(base_pairs, delta_exponents)))
    return rows


def validation_loss(
    model: D3Model,
    data,
    sparsities,
    pattern: PatternKind = PatternKind.GRID,
    seed: int = 0,
    batch_size: int = 8,
    sqrt_distance: bool = True,
) -> float:
    """Masked L2 loss in eval mode, averaged over images and sparsities."""
    total, n = 0.0, 0
    for fraction in sparsities:
        stream = _eval_inputs(data, fraction, PatternKind(pattern), seed, None, 1, False, sqrt_distance)
        for chunk in _batched(stream, batch_size):
            batch = Batch(
                np.stack([c[0].channels for c in chunk]),
                np.stack([c[2].s1 for c in chunk]),
                np.stack([c[2].s2 for c in chunk]),
                np.stack([c[1].values for c in chunk]),
                0,
            )
            total += float(batch_loss(model, batch, mode="eval", update_stats=False).data) * len(chunk)
            n += len(chunk)
    return total / n


def with_steps(cfg: TrainConfig, steps: int) -> TrainConfig:
    """Copy of ``cfg`` with a new horizon (schedule horizon grows if needed)."""
    sched = cfg.schedule
    if sched.total_steps < steps:
        sched = replace(sched, total_steps=steps)
    return replace(cfg, total_steps=steps, schedule=sched)
