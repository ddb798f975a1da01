"""Local attribution maps for image super-resolution networks.

Answers "which input pixels did this SR network actually use?" by
integrating detector gradients along a path from a blurred baseline
back to the input, then summarizing the resulting maps (diffusion
index, heat maps, cross-model comparisons).
"""

__version__ = "0.1.0"

from .analysis import (
    DiffusionStats,
    HeatMap,
    area_of_interest,
    average_ranks,
    correlate,
    diffusion_index,
    diffusion_stats,
    gini,
    kde_heatmap,
    normalize_for_viz,
    psnr,
)
from .attribution import (
    AttributionMap,
    PatchDetector,
    PathConfig,
    PathDiagnostics,
    detect,
    diagnostics,
    gaussian_blur,
    grad_times_input,
    lam,
    lam_with_diagnostics,
    make_baseline,
    path_point,
    support_window,
    vanilla_gradient,
)
from .dataset import (
    CurationReport,
    ImageRecord,
    curate,
    downsample,
    enumerate_candidates,
    image_record,
    load_image,
    rank_candidates,
    save_image,
)
from .engine import GradCheckReport, Tensor, conv2d, gradcheck, pixel_shuffle, prelu, relu
from .errors import LamError
from .zoo import (
    Adam,
    SRNetwork,
    TrainConfig,
    build_linear_upsampler,
    build_plain_cnn,
    build_residual_net,
    load_weights,
    probe_receptive_field,
    receptive_field,
    save_weights,
    train_tiny,
)

__all__ = [
    "__version__",
    "Tensor", "conv2d", "pixel_shuffle", "relu", "prelu", "gradcheck", "GradCheckReport",
    "SRNetwork", "TrainConfig", "Adam",
    "build_plain_cnn", "build_residual_net", "build_linear_upsampler",
    "save_weights", "load_weights", "train_tiny",
    "receptive_field", "probe_receptive_field",
    "PatchDetector", "PathConfig", "AttributionMap", "PathDiagnostics",
    "detect", "make_baseline", "path_point", "gaussian_blur",
    "lam", "lam_with_diagnostics", "vanilla_gradient", "grad_times_input",
    "diagnostics", "support_window",
    "DiffusionStats", "HeatMap", "gini", "diffusion_index", "diffusion_stats",
    "normalize_for_viz", "kde_heatmap", "area_of_interest", "psnr", "correlate",
    "average_ranks",
    "ImageRecord", "CurationReport", "load_image", "save_image", "downsample",
    "curate", "enumerate_candidates", "rank_candidates", "image_record",
    "LamError",
]
