"""The ``d3depth`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure. Depths are in meters, sparsities in percent of pixels.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import core
from .core import DepthMap, PatternMask, RgbImage
from .d3net import baseline_nn_fill, build_model, densify
from .exceptions import D3Error, NumericError, ParameterError
from .patterns import PatternKind, grid_pattern, interest_pattern, random_pattern
from .perturb import PerturbKind, PerturbSpec, perturb_samples

logger = logging.getLogger("d3depth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class DataError(Exception):
    """A data problem tied to a named file or flag."""


def _guard(label, fn, *args, **kwargs):
    """Run ``fn`` and prefix any data error with the file or flag it concerns."""
    try:
        return fn(*args, **kwargs)
    except ParameterError as exc:
        raise UsageError(_labelled(label, exc)) from None
    except (D3Error, OSError) as exc:
        if isinstance(exc, NumericError):
            raise
        raise DataError(_labelled(label, exc)) from None


def _labelled(label, exc):
    msg = str(exc)
    return msg if msg.startswith(str(label)) else f"{label}: {msg}"


# ---------------------------------------------------------------------------
# file helpers


def _read_depth_any(path) -> DepthMap:
    """16-bit PGM in millimeters or PFM in meters (by extension)."""
    if str(path).lower().endswith(".pfm"):
        values = core.read_float_map(path).astype(np.float64)
        return DepthMap(values)
    return core.read_depth(path)


def _write_depth_any(depth: DepthMap, path) -> None:
    core.ensure_parent(path)
    if str(path).lower().endswith(".pfm"):
        core.write_float_map(depth.values, path)
    else:
        core.write_depth(depth, path)


def _parse_fractions(text, flag):
    try:
        pcts = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated percentages, got {text!r}") from None
    if not pcts or any(not 0 < p <= 100 for p in pcts):
        raise UsageError(f"{flag}: every sparsity must lie in (0, 100] percent, got {text!r}")
    return [p / 100.0 for p in pcts]


def _add_pattern_flags(p):
    p.add_argument("--pattern", choices=[k.value for k in PatternKind], default="grid",
                   help="sampling pattern family (default: grid)")
    p.add_argument("--factor", type=int, help="grid spacing A in pixels (one sample per AxA cell)")
    p.add_argument("--count", type=int, help="number of sample points (random/interest patterns)")
    p.add_argument("--sparsity", type=float,
                   help="sample share in percent of pixels; sets --factor or --count when they are absent")
    p.add_argument("--rgb", help="RGB image, 8-bit P6 PPM (needed by the interest pattern)")


def _make_mask(args, depth: DepthMap, rgb: RgbImage | None) -> PatternMask:
    from .patterns import count_for_fraction, factor_for_count

    h, w = depth.shape
    kind = PatternKind(args.pattern)
    count = args.count
    if args.sparsity is not None and count is None:
        if not 0 < args.sparsity <= 100:
            raise UsageError(f"--sparsity must lie in (0, 100] percent, got {args.sparsity}")
        count = count_for_fraction(h, w, args.sparsity / 100.0)
    if kind is PatternKind.GRID:
        a = args.factor if args.factor is not None else (factor_for_count(h, w, count) if count else None)
        if a is None:
            raise UsageError("--factor (or --count/--sparsity) is required for the grid pattern")
        return _guard("--factor", grid_pattern, h, w, a)
    if count is None:
        raise UsageError(f"--count (or --sparsity) is required for the {kind.value} pattern")
    if kind is PatternKind.RANDOM:
        return _guard("--count", random_pattern, h, w, count, args.seed)
    if rgb is None:
        raise UsageError("--rgb is required for the interest pattern")
    return _guard("--count", interest_pattern, rgb, count, args.seed)


def _check_pattern_flags(args):
    """Usage checks that need no file contents."""
    if args.factor is None and args.count is None and args.sparsity is None:
        what = "--factor, --count or --sparsity" if args.pattern == "grid" else "--count or --sparsity"
        raise UsageError(f"{what} is required for the {args.pattern} pattern")
    if args.pattern == "interest" and not args.rgb:
        raise UsageError("--rgb is required for the interest pattern")


def _load_pair(args):
    _check_pattern_flags(args)
    depth = _guard(args.depth, _read_depth_any, args.depth)
    rgb = _guard(args.rgb, core.read_rgb, args.rgb) if getattr(args, "rgb", None) else None
    if rgb is not None and rgb.shape != depth.shape:
        raise DataError(f"{args.rgb}: size {rgb.shape} differs from {args.depth} size {depth.shape}")
    return rgb, depth


def _sparse_from_args(args, depth, rgb, patch=1):
    from .sparsify import build_sparse_input, patch_average_sample, point_samples, snap_mask_to_valid

    mask = _make_mask(args, depth, rgb)
    mask = _guard(args.depth, snap_mask_to_valid, mask, depth)
    samples = point_samples(depth, mask) if patch == 1 else _guard("--patch", patch_average_sample, depth, mask, patch)
    return mask, _guard(args.depth, build_sparse_input, samples, mask, not getattr(args, "raw_distance", False))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .harness.scenes import generate_scene, preset_spec, scene_seed

    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    os.makedirs(args.out_dir, exist_ok=True)
    for i in range(args.count):
        spec = _guard("--height/--width", preset_spec, args.preset, scene_seed(args.seed, i), args.height, args.width)
        rgb, depth = generate_scene(spec)
        stem = os.path.join(args.out_dir, f"scene_{i:04d}")
        core.write_rgb(rgb, stem + ".ppm")
        if depth.values.max() >= core.MAX_DEPTH_MM / 1000.0:
            core.write_float_map(depth.values, stem + ".pfm")
        else:
            core.write_depth(depth, stem + ".pgm")
    print(f"wrote {args.count} {args.preset} scene(s) to {args.out_dir}")


def cmd_sparsify(args):
    rgb, depth = _load_pair(args)
    mask, sparse = _sparse_from_args(args, depth, rgb, args.patch)
    for path, values in ((args.out_s1, sparse.s1), (args.out_s2, sparse.s2)):
        if path:
            core.ensure_parent(path)
            _guard(path, core.write_float_map, values, path)
    if args.out_mask:
        core.ensure_parent(args.out_mask)
        _guard(args.out_mask, core.write_mask, mask, args.out_mask)
    print(f"{mask.count} sample point(s), {100.0 * mask.count / mask.bits.size:.4g}% of pixels")


def cmd_perturb(args):
    from .sparsify import snap_mask_to_valid

    depth = _guard(args.depth, _read_depth_any, args.depth)
    mask = _guard(args.mask, core.read_mask, args.mask)
    if mask.shape != depth.shape:
        raise DataError(f"{args.mask}: size {mask.shape} differs from {args.depth} size {depth.shape}")
    mask = _guard(args.depth, snap_mask_to_valid, mask, depth)
    spec = _guard("--magnitude", PerturbSpec, PerturbKind(args.kind), args.magnitude, args.seed, args.additive)
    new_mask, samples, flag = _guard(args.depth, perturb_samples, spec, depth, mask)
    core.ensure_parent(args.out)
    _guard(args.out, core.write_float_map, samples.values, args.out)
    if args.out_mask:
        _guard(args.out_mask, core.write_mask, new_mask, args.out_mask)
    if flag:
        print("warning: every sample was dropped; the first one was kept", file=sys.stderr)
    print(f"{new_mask.count} perturbed sample(s) written to {args.out}")


def cmd_densify(args):
    from .harness.checkpoint import load_checkpoint
    from .harness.scenes import scale_for_mixed

    model, _, _ = _guard(args.checkpoint, load_checkpoint, args.checkpoint)
    rgb, depth = _load_pair(args)
    if rgb is None:
        raise UsageError("--rgb is required by densify")
    scaled, s = scale_for_mixed(depth) if args.mixed_domain else (depth, 1.0)
    _, sparse = _sparse_from_args(args, scaled, rgb)
    pred = _guard("--checkpoint", densify, model, rgb, sparse)
    if s != 1.0:
        pred = DepthMap(pred.values / s)
    _guard(args.out, _write_depth_any, pred, args.out)
    print(f"dense depth written to {args.out}")


def cmd_baseline(args):
    rgb, depth = _load_pair(args)
    _, sparse = _sparse_from_args(args, depth, rgb)
    _guard(args.out, _write_depth_any, baseline_nn_fill(sparse), args.out)
    print(f"NN-fill depth written to {args.out}")


def _data_source(args, count_flag="scenes"):
    from .harness.scenes import DirectorySource, MixedSource, SyntheticSource

    if args.data_dir:
        return _guard(args.data_dir, DirectorySource, args.data_dir)
    n = getattr(args, count_flag)
    if args.preset == "mixed":
        return MixedSource(SyntheticSource(n, "indoor", args.seed, args.height, args.width),
                           SyntheticSource(n, "outdoor", args.seed + 1, args.height, args.width))
    return SyntheticSource(n, args.preset, args.seed, args.height, args.width)


def cmd_train(args):
    from dataclasses import replace

    from .harness.checkpoint import load_checkpoint, save_checkpoint
    from .harness.config import ExperimentConfig, load_config
    from .harness.scenes import DirectorySource, MixedSource, SyntheticSource
    from .harness.training import train, with_steps

    exp = _guard(args.config, load_config, args.config) if args.config else ExperimentConfig()
    cfg = exp.train
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = _guard("--steps", with_steps, cfg, args.steps)
    if args.data_dir:
        data = _guard(args.data_dir, DirectorySource, args.data_dir)
    else:
        h, w, n, seed = exp.scene.height, exp.scene.width, exp.train_scenes, cfg.seed
        if exp.preset == "mixed":
            data = MixedSource(SyntheticSource(n, "indoor", seed, h, w), SyntheticSource(n, "outdoor", seed + 1, h, w))
        else:
            data = SyntheticSource(n, exp.preset, seed, h, w)
    optimizer, start = None, 0
    if args.resume:
        model, optimizer, meta = _guard(args.resume, load_checkpoint, args.resume)
        start = int(meta.get("step", 0))
    else:
        model = build_model(exp.net, seed=cfg.seed)
    if args.log:
        core.ensure_parent(args.log)
    log = _guard("--config", train, model, data, cfg, optimizer, start, None, args.log)
    core.ensure_parent(args.checkpoint_out)
    _guard(args.checkpoint_out, save_checkpoint, args.checkpoint_out, model, log.optimizer, cfg.total_steps)
    last = log.losses[-1] if log.losses else float("nan")
    print(f"trained steps {start}..{cfg.total_steps - 1}, final loss {last:.6g}; checkpoint {args.checkpoint_out}")


def cmd_eval(args):
    from .harness.checkpoint import load_checkpoint
    from .harness.config import parse_perturb
    from .harness.training import evaluate
    from .metrics import write_depth_bin_csv, write_metrics_csv

    fractions = _parse_fractions(args.sparsities, "--sparsities")
    model, _, _ = _guard(args.checkpoint, load_checkpoint, args.checkpoint)
    data = _data_source(args)
    perturb = None
    if args.perturb:
        try:
            perturb = parse_perturb(args.perturb)
        except ValueError as exc:
            raise UsageError(f"--perturb: {exc}") from None
        if perturb is not None:
            perturb = PerturbSpec(perturb.kind, perturb.magnitude, args.seed)
    deltas = (1.0, 2.0, 3.0, 0.1) if args.delta01 else (1.0, 2.0, 3.0)
    rows = _guard("--data-dir", evaluate, model, data, fractions, perturb, PatternKind(args.pattern), args.patch,
                  args.preset == "mixed", args.seed, 8, deltas)
    triples = [(r.model, r.sparsity_pct, r.report) for r in rows]
    if args.csv:
        core.ensure_parent(args.csv)
        _guard(args.csv, write_metrics_csv, args.csv, triples, args.delta01)
    for model_name, pct, rep in triples:
        print(f"{model_name:8s} {pct:8.4g}%  rmse {rep.rmse:.4f} m  mre {rep.mre:.3f}%  delta1 {rep.delta(1.0):.2f}%")
    if args.bins_csv:
        from .harness.training import make_sparse
        from .metrics import mre_by_depth_bin

        pairs_p, pairs_g = [], []
        for i in range(len(data)):
            rgb, depth = data[i]
            count = max(1, round(fractions[0] * depth.values.size))
            sparse, _ = make_sparse(rgb, depth, count, PatternKind(args.pattern), [args.seed, i, 3])
            pred = densify(model, rgb, sparse)
            pairs_p.append(pred.values.ravel())
            pairs_g.append(depth.values.ravel())
        _guard(args.bins_csv, write_depth_bin_csv, args.bins_csv,
               mre_by_depth_bin(np.concatenate(pairs_p), np.concatenate(pairs_g)))


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed, network=not args.layers_only)
    for name, err in results.items():
        print(f"{name:28s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if not worst < TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="d3depth", description="RGB + sparse depth densification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text.replace("%%", "%"))
        p.add_argument("--seed", type=int, help="PRNG seed (integer, default 0; for train, the config seed)")
        return p

    p = command("synth", "Generate synthetic RGB-D scenes (NAME.ppm + NAME.pgm in mm, or NAME.pfm in m above 65.5 m).")
    p.add_argument("--preset", choices=["indoor", "outdoor"], default="indoor",
                   help="depth range: indoor 1-10 m, outdoor 1-80 m")
    p.add_argument("--count", type=int, default=1, help="number of scenes")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--height", type=int, default=96, help="image height in pixels (default 96)")
    p.add_argument("--width", type=int, default=128, help="image width in pixels (default 128)")
    p.set_defaults(func=cmd_synth)

    p = command("sparsify", "Sample a depth map and write S1 (m) and S2 (sqrt px) as PFM.")
    p.add_argument("--depth", required=True, help="depth map: 16-bit PGM in mm or PFM in m")
    _add_pattern_flags(p)
    p.add_argument("--patch", type=int, default=1, help="odd patch size in pixels for averaged samples (default 1)")
    p.add_argument("--raw-distance", action="store_true", help="write S2 as plain distance in px instead of sqrt")
    p.add_argument("--out-s1", help="output PFM for S1 (nearest-sample depth, m)")
    p.add_argument("--out-s2", help="output PFM for S2 (sqrt of distance to nearest sample, sqrt px)")
    p.add_argument("--out-mask", help="output PGM of the snapped sample mask (255 = sample)")
    p.set_defaults(func=cmd_sparsify)

    p = command("perturb", "Apply a sensor-error model to sparse samples; writes sample depths (m) as PFM.")
    p.add_argument("--depth", required=True, help="dense depth map the samples are read from (PGM mm or PFM m)")
    p.add_argument("--mask", required=True, help="sample mask, 8-bit PGM (255 = sample)")
    p.add_argument("--kind", required=True, choices=[k.value for k in PerturbKind], help="error model")
    p.add_argument("--magnitude", type=float, required=True,
                   help="dropout probability (0-1), relative sigma (0.03 = 3%%), shift in px or rotation in degrees")
    p.add_argument("--additive", action="store_true", help="gaussian sigma in meters instead of relative")
    p.add_argument("--out", required=True, help="output PFM of perturbed samples (m, 0 = no sample)")
    p.add_argument("--out-mask", help="output PGM of the surviving sample mask")
    p.set_defaults(func=cmd_perturb)

    p = command("densify", "Predict dense depth with a trained checkpoint.")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.d3ck)")
    p.add_argument("--depth", required=True, help="depth map to sample from (PGM mm or PFM m)")
    _add_pattern_flags(p)
    p.add_argument("--mixed-domain", action="store_true", help="scale depths to <= 10 m around the network")
    p.add_argument("--out", required=True, help="output dense depth (PGM mm, or PFM m by extension)")
    p.set_defaults(func=cmd_densify, raw_distance=False)

    p = command("baseline", "Nearest-neighbour fill of sparse samples.")
    p.add_argument("--depth", required=True, help="depth map to sample from (PGM mm or PFM m)")
    _add_pattern_flags(p)
    p.add_argument("--out", required=True, help="output dense depth (PGM mm, or PFM m by extension)")
    p.set_defaults(func=cmd_baseline, raw_distance=False)

    p = command("train", "Train a model; writes a checkpoint and a step,loss,sparsity_pct,lr CSV log.")
    p.add_argument("--config", help="key = value config file (NetConfig, TrainConfig, SceneSpec fields)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data-dir", help="directory of NAME.ppm + NAME.pgm (mm) training pairs")
    src.add_argument("--synthetic", action="store_true", help="train on generated scenes (default)")
    p.add_argument("--steps", type=int, help="override total_steps (optimizer steps)")
    p.add_argument("--resume", help="checkpoint to resume from (continues at its step)")
    p.add_argument("--checkpoint-out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="output CSV training log")
    p.set_defaults(func=cmd_train, seed=None)

    p = command("eval", "Evaluate a checkpoint and the NN-fill baseline; RMSE in m, MRE and deltas in %%.")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.d3ck)")
    p.add_argument("--sparsities", default="0.065,0.18,0.39", help="comma-separated sample shares in %% of pixels")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data-dir", help="directory of NAME.ppm + NAME.pgm (mm) evaluation pairs")
    src.add_argument("--synthetic", action="store_true", help="evaluate on generated scenes (default)")
    p.add_argument("--scenes", type=int, default=40, help="number of synthetic scenes (default 40)")
    p.add_argument("--preset", choices=["indoor", "outdoor", "mixed"], default="indoor",
                   help="synthetic depth range; mixed also scales depths to <= 10 m")
    p.add_argument("--height", type=int, default=96, help="synthetic image height in pixels")
    p.add_argument("--width", type=int, default=128, help="synthetic image width in pixels")
    p.add_argument("--pattern", choices=[k.value for k in PatternKind], default="grid", help="sampling pattern")
    p.add_argument("--patch", type=int, default=1, help="odd patch size in pixels for averaged samples")
    p.add_argument("--perturb", help="error model KIND:MAGNITUDE, e.g. gaussian:0.03 or shift_const:2 (px)")
    p.add_argument("--delta01", action="store_true", help="also report delta_0.1 (ratio < 1.25^0.1)")
    p.add_argument("--csv", help="output metrics CSV")
    p.add_argument("--bins-csv", help="output CSV of MRE per 0.5 m depth bin (first sparsity)")
    p.set_defaults(func=cmd_eval)

    p = command("gradcheck", "Finite-difference check of every layer and the full network (float64).")
    p.add_argument("--layers-only", action="store_true", help="skip the full-network case")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.seed is None and args.func is not cmd_train:
            args.seed = 0
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, D3Error, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
