"""Training-free one-shot part segmentation.

Given one labeled example and pre-extracted feature maps, the engine fuses
two feature sources, selects discriminative channels per part, transfers
labels to a query by pixel-wise cosine similarity, and refines the result
with an edge-aware bilateral solver.
"""

__version__ = "0.1.0"

from .errors import (
    DegenerateCenterWarning,
    FormatError,
    ShapeError,
    SolverDidNotConverge,
    ThinPartWarning,
    ValidationError,
)
from .evaluate import ConfusionMatrix, IouReport, accumulate, iou_report
from .fusion import FusedFeature, SourceSpan, fuse, l2_normalize
from .refine import BilateralGrid, SolveInfo, SolverConfig, build_grid, refine_scores, solve
from .selection import (
    ClassPixelSet,
    SelectionConfig,
    SweepResult,
    channel_scores,
    class_pixel_sets,
    default_k_grid,
    metric_direction,
    select_for_example,
    select_top_k,
    sweep_k,
)
from .synth import Fixture, SynthSpec, generate
from .tensor_io import (
    FeatureMap,
    ImageRGB,
    PartMaskSet,
    PartSelection,
    SelectionRecord,
    SourceSelection,
    downsample_mask,
    load_mask_set,
    load_selection,
    read_image,
    read_labels,
    read_plane,
    read_tensor,
    save_selection,
    write_image,
    write_labels,
    write_tensor,
)
from .transfer import (
    LabelMap,
    ScoreField,
    TransferConfig,
    argmax_labels,
    bilinear_resize,
    finalize,
    segment,
    similarity_weights,
    transfer_class,
)

__all__ = [
    "__version__",
    "BilateralGrid",
    "ClassPixelSet",
    "ConfusionMatrix",
    "DegenerateCenterWarning",
    "FeatureMap",
    "Fixture",
    "FormatError",
    "FusedFeature",
    "ImageRGB",
    "IouReport",
    "LabelMap",
    "PartMaskSet",
    "PartSelection",
    "ScoreField",
    "SelectionConfig",
    "SelectionRecord",
    "ShapeError",
    "SolveInfo",
    "SolverConfig",
    "SolverDidNotConverge",
    "SourceSelection",
    "SourceSpan",
    "SweepResult",
    "SynthSpec",
    "ThinPartWarning",
    "TransferConfig",
    "ValidationError",
    "accumulate",
    "argmax_labels",
    "bilinear_resize",
    "build_grid",
    "channel_scores",
    "class_pixel_sets",
    "default_k_grid",
    "downsample_mask",
    "finalize",
    "fuse",
    "generate",
    "iou_report",
    "l2_normalize",
    "load_mask_set",
    "load_selection",
    "metric_direction",
    "read_image",
    "read_labels",
    "read_plane",
    "read_tensor",
    "refine_scores",
    "save_selection",
    "segment",
    "select_for_example",
    "select_top_k",
    "similarity_weights",
    "solve",
    "sweep_k",
    "transfer_class",
    "write_image",
    "write_labels",
    "write_tensor",
]
