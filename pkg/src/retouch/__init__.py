"""Text-guided, mask-free local image retouching.

Two stages: propose an editable region from a query description
(segmentation + cross-modal scoring + adaptive threshold + location
filter), then generate candidate edits with a background-preserving
latent denoising loop and pick the best by combined alignment/fidelity
assessment.  Model inference lives behind five backend contracts with
deterministic mocks and a remote wire protocol.
"""

__version__ = "0.1.0"

from .assessment import (
    AssessmentConfig,
    AssessmentScore,
    SelectionResult,
    assess,
    cma_score,
    iqa_score,
    select,
)
from .backends import BackendBundle, resolve_backend
from .core import (
    BinaryMask,
    Image,
    TextPrompt,
    apply_mask,
    mask_centroid,
    mask_union,
)
from .diffusion import (
    DiffusionSchedule,
    Proposal,
    RetouchConfig,
    blend,
    build_schedule,
    denoise_step,
    downsample_mask,
    forward_noise,
    retouch,
)
from .errors import (
    BackendError,
    EmptyRegionError,
    FileFormatError,
    FramingError,
    NoMatchingEntityError,
    RemoteError,
    RetouchError,
    ShapeError,
    TransportError,
)
from .imageio import quantize8, read_image, read_mask, write_image, write_mask
from .mask_gen import (
    LocationConstraint,
    MaskGenConfig,
    MaskReport,
    ScoredEntity,
    ThresholdResult,
    adaptive_threshold,
    fixed_threshold,
    generate_mask,
    location_refine,
    parse_location,
    score_entities,
)
from .metrics import (
    ManifestEntry,
    MetricReport,
    evaluate_manifest,
    load_manifest,
    mse,
    psnr,
    ssim,
)

__all__ = [
    "AssessmentConfig", "AssessmentScore", "SelectionResult", "assess",
    "cma_score", "iqa_score", "select",
    "BackendBundle", "resolve_backend",
    "BinaryMask", "Image", "TextPrompt", "apply_mask", "mask_centroid",
    "mask_union",
    "DiffusionSchedule", "Proposal", "RetouchConfig", "blend",
    "build_schedule", "denoise_step", "downsample_mask", "forward_noise",
    "retouch",
    "BackendError", "EmptyRegionError", "FileFormatError", "FramingError",
    "NoMatchingEntityError", "RemoteError", "RetouchError", "ShapeError",
    "TransportError",
    "quantize8", "read_image", "read_mask", "write_image", "write_mask",
    "LocationConstraint", "MaskGenConfig", "MaskReport", "ScoredEntity",
    "ThresholdResult", "adaptive_threshold", "fixed_threshold",
    "generate_mask", "location_refine", "parse_location", "score_entities",
    "ManifestEntry", "MetricReport", "evaluate_manifest", "load_manifest",
    "mse", "psnr", "ssim",
]
