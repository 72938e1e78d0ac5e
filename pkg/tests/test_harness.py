import csv
import zlib
from dataclasses import replace

import numpy as np
import pytest

from d3depth import core
from d3depth.core import DepthMap
from d3depth.d3net import NetConfig, build_model, densify
from d3depth.exceptions import CorruptionError, FormatError, InputError, NumericError, ParameterError
from d3depth.harness import (
    DirectorySource,
    MixedSource,
    SceneSpec,
    SyntheticSource,
    TrainConfig,
    desk_train_config,
    draw_batch,
    evaluate,
    generate_scene,
    load_checkpoint,
    lr_at,
    make_sparse,
    save_checkpoint,
    scale_for_mixed,
    train,
    validation_loss,
)
from d3depth.harness.config import build_config, config_keys, parse_config_text
from d3depth.patterns import PatternKind, ScheduleKind, SparsitySchedule, schedule_count
from d3depth.perturb import PerturbKind, PerturbSpec


# ---------------------------------------------------------------------------
# scenes


def test_scene_is_deterministic_and_in_range():
    spec = SceneSpec(seed=11)
    rgb, depth = generate_scene(spec)
    rgb2, depth2 = generate_scene(spec)
    np.testing.assert_array_equal(depth.values, depth2.values)
    np.testing.assert_array_equal(rgb.channels, rgb2.channels)
    assert depth.shape == (96, 128) and rgb.shape == (96, 128)
    assert depth.values.min() >= 1.0 and depth.values.max() <= 10.0
    assert depth.valid.all()


def test_depth_edges_coincide_with_colour_edges():
    # every depth discontinuity also changes the albedo noticeably
    for seed in range(5):
        rgb, depth = generate_scene(SceneSpec(seed=seed))
        d = depth.values
        jump = np.abs(np.diff(d, axis=1)) > 0.5
        colour = np.abs(np.diff(rgb.channels, axis=1)).max(axis=2)
        assert jump.any()
        assert np.mean(colour[jump] > 0.1) > 0.95


def test_outdoor_preset_range():
    src = SyntheticSource(3, "outdoor", seed=2)
    for i in range(3):
        _, depth = src[i]
        assert depth.values.max() <= 80.0 and depth.values.min() >= 1.0
    assert max(src[i][1].values.max() for i in range(3)) > 10.0
    with pytest.raises(ParameterError):
        SyntheticSource(3, "underwater")
    with pytest.raises(IndexError):
        src[3]


def test_mixed_scaling_round_trip():
    depth = DepthMap([[20.0, 40.0], [0.0, 5.0]])
    scaled, s = scale_for_mixed(depth)
    assert s == 0.25
    np.testing.assert_array_equal(scaled.values, [[5.0, 10.0], [0.0, 1.25]])
    same, s = scale_for_mixed(DepthMap([[3.0]]))
    assert s == 1.0 and same.values[0, 0] == 3.0


def test_mixed_source_alternates():
    a, b = SyntheticSource(2, "indoor", 0), SyntheticSource(3, "outdoor", 0)
    mixed = MixedSource(a, b)
    assert len(mixed) == 4
    assert mixed[0] is a[0] and mixed[1] is b[0] and mixed[3] is b[1]


def test_directory_source(tmp_path):
    rgb, depth = generate_scene(SceneSpec(seed=1, height=16, width=20))
    core.write_rgb(rgb, tmp_path / "a.ppm")
    core.write_depth(depth, tmp_path / "a.pgm")
    core.write_rgb(rgb, tmp_path / "b.ppm")
    core.write_float_map(depth.values, tmp_path / "b.pfm")
    core.write_rgb(rgb, tmp_path / "orphan.ppm")
    src = DirectorySource(tmp_path)
    assert len(src) == 2
    assert np.max(np.abs(src[0][1].values - depth.values)) <= 0.0005 + 1e-12
    np.testing.assert_allclose(src[1][1].values, depth.values, rtol=1e-6)
    with pytest.raises(InputError):
        DirectorySource(tmp_path / "missing")


# ---------------------------------------------------------------------------
# sampling and batches


def test_make_sparse_pipeline_snaps_and_perturbs():
    rgb, depth = generate_scene(SceneSpec(seed=4, height=32, width=32))
    values = depth.values.copy()
    values[:, :9] = 0.0
    holes = DepthMap(values)
    sparse, mask = make_sparse(rgb, holes, 16, PatternKind.GRID)
    assert not (mask.bits & ~holes.valid).any()
    assert np.all(sparse.s1 > 0)
    noisy, mask2 = make_sparse(rgb, holes, 16, PatternKind.GRID, perturb=PerturbSpec("gaussian", 0.1), perturb_seed=1)
    assert np.array_equal(mask.bits, mask2.bits)
    assert not np.array_equal(noisy.s1[mask.bits], sparse.s1[mask.bits])


def test_draw_batch_is_a_pure_function_of_step():
    data = SyntheticSource(6, "indoor", 0, 32, 48)
    cfg = desk_train_config(batch_size=3, total_steps=10, schedule=SparsitySchedule(ScheduleKind.STATIC, 6, 10))
    a, b = draw_batch(data, cfg, 4), draw_batch(data, cfg, 4)
    for x, y in zip((a.rgb, a.s1, a.s2, a.gt), (b.rgb, b.s1, b.s2, b.gt)):
        np.testing.assert_array_equal(x, y)
    assert a.rgb.shape == (3, 32, 48, 3) and a.count == 6
    assert not np.array_equal(a.gt, draw_batch(data, cfg, 5).gt)


def test_random_density_batches_vary_the_count():
    data = SyntheticSource(4, "indoor", 0, 32, 32)
    sched = SparsitySchedule(ScheduleKind.RANDOM_DENSITY, 4, 50)
    cfg = desk_train_config(batch_size=2, total_steps=50, schedule=sched, pattern="random")
    counts = {draw_batch(data, cfg, t).count for t in range(20)}
    assert len(counts) > 3
    assert all(1 <= c <= round(0.0098 * 1024) + 1 for c in counts)


def test_random_density_per_image_or_per_step():
    data = SyntheticSource(4, "indoor", 0, 64, 64)
    sched = SparsitySchedule(ScheduleKind.RANDOM_DENSITY, 4, 50)
    cfg = desk_train_config(batch_size=4, total_steps=50, schedule=sched, pattern="random")
    per_image = [(draw_batch(data, cfg, t).s2 == 0).sum(axis=(1, 2)) for t in range(5)]
    assert any(len(set(n)) > 1 for n in per_image)
    expected = [schedule_count(sched, 3, 0, 64 * 64, image=b) for b in range(4)]
    assert draw_batch(data, cfg, 3).count == np.mean(expected)
    step_cfg = replace(cfg, density_per_image=False)
    for t in range(5):
        n = (draw_batch(data, step_cfg, t).s2 == 0).sum(axis=(1, 2))
        assert len(set(n)) == 1 and n[0] == schedule_count(sched, t, 0, 64 * 64)


def test_crop_and_mixed_batches():
    data = MixedSource(SyntheticSource(2, "indoor", 0, 32, 32), SyntheticSource(2, "outdoor", 0, 32, 32))
    cfg = desk_train_config(batch_size=4, total_steps=5, crop=(16, 24), mixed_domain=True,
                            schedule=SparsitySchedule(ScheduleKind.STATIC, 4, 5))
    batch = draw_batch(data, cfg, 0)
    assert batch.gt.shape == (4, 16, 24)
    assert batch.gt.max() <= 10.0 + 1e-12


def test_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(total_steps=100, schedule=SparsitySchedule(total_steps=50))
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(crop=(0, 5))


def test_learning_rate_schedule():
    cfg = TrainConfig()
    for t, expected in [(0, 1e-3), (24999, 1e-3), (25000, 2e-4), (50000, 4e-5), (79999, 8e-6)]:
        assert lr_at(cfg, t) == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# training, evaluation and checkpoints


@pytest.fixture(scope="module")
def tiny():
    data = SyntheticSource(8, "indoor", 0, 32, 32)
    cfg = desk_train_config(batch_size=2, total_steps=6, log_every=2,
                            schedule=SparsitySchedule(ScheduleKind.STATIC, 8, 6))
    return data, cfg


def test_training_logs_and_resume(tiny, tmp_path):
    data, cfg = tiny
    m1 = build_model(seed=0)
    log = train(m1, data, cfg, log_path=tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "loss", "sparsity_pct", "lr"]
    assert [r[0] for r in rows[1:]] == ["0", "2", "4"]
    assert rows[1][2] == "0.78125" and rows[1][3] == "0.001"
    assert len(log.losses) == 6

    m2 = build_model(seed=0)
    first = train(m2, data, cfg, end_step=3)
    save_checkpoint(tmp_path / "mid.d3ck", m2, first.optimizer, 3)
    m3, opt, meta = load_checkpoint(tmp_path / "mid.d3ck")
    assert meta["step"] == 3
    rest = train(m3, data, cfg, optimizer=opt, start_step=3)
    assert first.losses + rest.losses == log.losses
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name].data, m3.params[name].data)


def test_step_range_validation(tiny):
    data, cfg = tiny
    with pytest.raises(ParameterError):
        train(build_model(), data, cfg, start_step=4, end_step=2)


def test_nonfinite_loss_is_reported(tiny, tmp_path):
    data, cfg = tiny
    model = build_model(seed=0)
    model.params["head.out.conv.b"].data[...] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        train(model, data, cfg, log_path=tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().startswith("step,loss")


def test_checkpoint_round_trip_is_bit_exact(tiny, tmp_path):
    data, cfg = tiny
    model = build_model(NetConfig(L=1, k=4, scales=2), seed=3)
    log = train(model, data, cfg, end_step=2)
    path = tmp_path / "m.d3ck"
    save_checkpoint(path, model, log.optimizer, 2)
    back, opt, meta = load_checkpoint(path)
    assert back.config == model.config and opt.t == 2
    rgb, depth = data[0]
    sparse, _ = make_sparse(rgb, depth, 8)
    np.testing.assert_array_equal(densify(model, rgb, sparse).values, densify(back, rgb, sparse).values)
    for k in model.bn:
        np.testing.assert_array_equal(model.bn[k].mean, back.bn[k].mean)
    save_checkpoint(tmp_path / "again.d3ck", back, opt, 2)
    assert (tmp_path / "again.d3ck").read_bytes() == path.read_bytes()


def test_checkpoint_damage_is_detected(tmp_path):
    path = tmp_path / "m.d3ck"
    save_checkpoint(path, build_model(NetConfig(L=1, k=2, scales=1)))
    raw = path.read_bytes()
    (tmp_path / "trunc.d3ck").write_bytes(raw[:-100])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "trunc.d3ck")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "flip.d3ck").write_bytes(bytes(flipped))
    with pytest.raises(CorruptionError, match="checksum"):
        load_checkpoint(tmp_path / "flip.d3ck")
    (tmp_path / "magic.d3ck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.d3ck")
    body = bytearray(raw[:-4])
    body[4:8] = (99).to_bytes(4, "little")
    (tmp_path / "ver.d3ck").write_bytes(bytes(body) + zlib.crc32(bytes(body)).to_bytes(4, "little"))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "ver.d3ck")


def test_evaluate_reports_model_and_baseline(tiny):
    data, _ = tiny
    model = build_model(seed=0)
    rows = evaluate(model, data, [0.01, 0.05])
    assert [(r.model, r.sparsity_pct) for r in rows] == [("d3", 1.0), ("nn_fill", 1.0), ("d3", 5.0), ("nn_fill", 5.0)]
    # a fresh model predicts S1, so it ties the baseline exactly
    assert rows[0].report == rows[1].report
    assert rows[2].report.rmse < rows[0].report.rmse
    with pytest.raises(ParameterError):
        evaluate(model, data, [0.0])
    loss = validation_loss(model, data, [0.01])
    assert loss == pytest.approx(rows[0].report.rmse ** 2, rel=1e-5)


def test_evaluate_mixed_domain_reports_original_units():
    data = SyntheticSource(2, "outdoor", 0, 32, 32)
    model = build_model(seed=0)
    plain = evaluate(model, data, [0.02])
    mixed = evaluate(model, data, [0.02], mixed_domain=True)
    assert mixed[1].report.rmse == pytest.approx(plain[1].report.rmse, rel=1e-9)


# ---------------------------------------------------------------------------
# configuration files


def test_config_parsing():
    cfg = parse_config_text(
        """
        # a comment
        L = 3
        k = 4
        total_steps = 50
        schedule = random_density
        perturb = shift_const:2
        crop = 48x64
        seed = 9
        preset = outdoor
        """
    )
    assert cfg.net.L == 3 and cfg.net.k == 4
    assert cfg.train.total_steps == 50 and cfg.train.schedule.kind is ScheduleKind.RANDOM_DENSITY
    assert cfg.train.perturb == PerturbSpec(PerturbKind.SHIFT_CONST, 2.0, seed=9)
    assert cfg.train.crop == (48, 64)
    assert cfg.scene.depth_range == (1.0, 80.0)
    assert cfg.train.schedule.base_count == 48
    assert "use_s2" in config_keys()


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("bogus = 1", ":1: unknown key"),
        ("L = 2\nL = 3", ":2: key 'L' given twice"),
        ("k = six", ":1: bad value"),
        ("perturb = wobble:3", ":1: bad value"),
        ("just text", ":1: expected"),
        ("L = 0", "L"),
        ("preset = moon", "preset"),
    ],
)
def test_config_errors_name_the_line(text, fragment):
    with pytest.raises(FormatError, match=fragment):
        parse_config_text(text)


def test_mixed_preset_enables_mixed_domain():
    assert build_config({"preset": "mixed"}).train.mixed_domain
