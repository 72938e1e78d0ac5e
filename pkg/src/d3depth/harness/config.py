"""Plain-text experiment configuration.

One ``key = value`` pair per line; ``#`` starts a comment. Keys are the
field names of NetConfig, TrainConfig and SceneSpec, plus ``base_count`` and
``range`` for the sparsity schedule (``schedule`` names its kind),
``preset`` (indoor, outdoor or mixed) and ``train_scenes``/``val_scenes``.
Unknown keys are rejected. Example::

    L = 2
    k = 6
    total_steps = 2000
    schedule = random_density
    perturb = gaussian:0.03
    crop = 64x96
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..d3net import NetConfig
from ..exceptions import D3Error, FormatError
from ..patterns import RANDOM_DENSITY_RANGE, PatternKind, ScheduleKind, SparsitySchedule
from ..perturb import PerturbKind, PerturbSpec
from .scenes import PRESETS, SceneSpec
from .training import TrainConfig

# share of pixels sampled when base_count is not given (0.39%)
DEFAULT_FRACTION = 1 / 256


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(total_steps=2000, schedule=SparsitySchedule(total_steps=2000))
    )
    scene: SceneSpec = field(default_factory=SceneSpec)
    preset: str = "indoor"
    train_scenes: int = 200
    val_scenes: int = 40


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _pair(cast):
    def parse(text):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated values, got {text!r}")
        return cast(parts[0]), cast(parts[1])
    return parse


def _crop(text):
    if text.lower() == "none":
        return None
    h, sep, w = text.lower().partition("x")
    if not sep:
        raise ValueError(f"expected HEIGHTxWIDTH, got {text!r}")
    return int(h), int(w)


def parse_perturb(text):
    """``none`` or ``kind:magnitude`` (e.g. ``shift_const:2``)."""
    if text.lower() == "none":
        return None
    kind, sep, mag = text.partition(":")
    if not sep:
        raise ValueError(f"expected KIND:MAGNITUDE, got {text!r}")
    return PerturbSpec(PerturbKind(kind.strip()), float(mag))


_NET = {"L": int, "k": int, "scales": int, "inject_sparse_everywhere": _bool, "use_s2": _bool,
        "stem_width": int, "head_width": int}
_TRAIN = {"batch_size": int, "lr": float, "lr_decay": float, "lr_decay_every": int, "total_steps": int,
          "pattern": PatternKind, "mixed_domain": _bool, "flip_augment": _bool, "crop": _crop,
          "seed": int, "patch": int, "sqrt_distance": _bool, "density_per_image": _bool, "log_every": int}
_SCENE = {"height": int, "width": int, "depth_range": _pair(float), "object_count_range": _pair(int)}
_OTHER = {"schedule": ScheduleKind, "base_count": int, "range": _pair(float), "perturb": parse_perturb,
          "preset": str, "train_scenes": int, "val_scenes": int}
PARSERS = {**_NET, **_TRAIN, **_SCENE, **_OTHER}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise FormatError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in PARSERS:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise FormatError(f"{source}:{lineno}: key {key!r} given twice")
        try:
            values[key] = PARSERS[key](value)
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        return build_config(values)
    except D3Error as exc:
        raise FormatError(f"{source}: {exc}") from None


def build_config(values: dict) -> ExperimentConfig:
    preset = values.get("preset", "indoor")
    if preset not in PRESETS and preset != "mixed":
        raise FormatError(f"preset must be indoor, outdoor or mixed, got {preset!r}")
    scene_kw = {k: values[k] for k in _SCENE if k in values}
    if "depth_range" not in scene_kw and preset in PRESETS:
        scene_kw["depth_range"] = PRESETS[preset]
    scene = SceneSpec(seed=values.get("seed", 0), **scene_kw)
    net = NetConfig(**{k: values[k] for k in _NET if k in values})

    train_kw = {k: values[k] for k in _TRAIN if k in values}
    steps = train_kw.get("total_steps", 2000)
    train_kw["total_steps"] = steps
    base = values.get("base_count", max(1, round(DEFAULT_FRACTION * scene.height * scene.width)))
    schedule = SparsitySchedule(
        values.get("schedule", ScheduleKind.STATIC), base, steps, values.get("range", RANDOM_DENSITY_RANGE)
    )
    perturb = values.get("perturb")
    if perturb is not None:
        perturb = replace(perturb, seed=values.get("seed", 0))
    if preset == "mixed":
        train_kw.setdefault("mixed_domain", True)
    train = TrainConfig(schedule=schedule, perturb=perturb, **train_kw)
    return ExperimentConfig(
        net, train, scene, preset, values.get("train_scenes", 200), values.get("val_scenes", 40)
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def config_keys() -> list[str]:
    return sorted(PARSERS)

