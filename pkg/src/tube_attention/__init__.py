"""Tube self-attention for action quality assessment, at desk scale."""

from .attention import (
    AttentionGradients,
    AttentionParams,
    init_params,
    masked_nonlocal_reference,
    nonlocal_forward,
    stack_backward,
    stack_forward,
    tsa_backward,
    tsa_forward,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    FormatError,
    GeometryError,
    NumericError,
    ResolutionError,
    ShapeError,
    TubeAttentionError,
)
from .flops import CostReport, measure_kernel_flops, pairs_nonlocal, pairs_tsa
from .geometry import GridSpec, TrackBox, TubeIndex, build_tube, coverage, mask_from_box, union_masks
from .metrics import accuracy, fisher_z_average, spearman
from .tensor import clip_mean, gather_positions, matmul, read_ft1, scatter_add, write_ft1

__version__ = "0.1.0"
