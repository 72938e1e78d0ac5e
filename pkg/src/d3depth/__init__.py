"""Deep depth densification: dense depth from RGB plus a few depth samples.

The pipeline snaps a sampling pattern onto valid depth, turns the samples
into a nearest-sample depth map (S1) and a distance map (S2), and predicts
a per-pixel correction to S1 with a small encoder-decoder network.
"""

from .core import (
    DepthMap,
    PatternMask,
    RgbImage,
    SparseInput,
    read_depth,
    read_float_map,
    read_mask,
    read_rgb,
    write_depth,
    write_float_map,
    write_mask,
    write_rgb,
)
from .d3net import DESK_CONFIG, PAPER_CONFIG, D3Model, NetConfig, baseline_nn_fill, build_model, densify
from .exceptions import (
    CorruptionError,
    D3Error,
    EvaluationError,
    FormatError,
    InputError,
    NumericError,
    ParameterError,
    PreconditionError,
    ShapeError,
    ValidationError,
)
from .metrics import MetricsReport, compute_metrics
from .patterns import (
    PatternKind,
    PatternSpec,
    ScheduleKind,
    SparsitySchedule,
    grid_pattern,
    interest_pattern,
    random_pattern,
    schedule_count,
)
from .perturb import PerturbKind, PerturbSpec, apply_dropout, apply_gaussian, apply_misregistration
from .sparsify import (
    SiteAssignment,
    build_sparse_input,
    distance_transform,
    patch_average_sample,
    snap_mask_to_valid,
)

__version__ = "0.1.0"
