"""Local attribution maps for super-resolution networks.

An attribution run asks: which low-resolution pixels did the network
use to reconstruct the detail inside one patch of its output? The
answer is a path integral of gradients. A detector scores the local
gradient magnitude of the SR output inside the patch; a baseline
removes the detail in question (heavy Gaussian blur, or a black image);
a path function walks from baseline back to the true input; and the
attribution of each input pixel is the integral of
d(detector)/d(input pixel) times the pixel's movement along the path.

Discretization: with ``m`` steps, gradients are evaluated at the left
endpoints alpha = k/m for k = 0..m-1 and multiplied by the forward
differences gamma((k+1)/m) - gamma(k/m). Summed over all pixels this
approximates detector(input) - detector(baseline); the relative gap is
reported as ``completeness_residual`` so callers can check the
approximation quality directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import Tensor
from .errors import ConfigError, DimensionError, NumericError, RangeError

__all__ = [
    "PatchDetector",
    "PathConfig",
    "AttributionMap",
    "PathDiagnostics",
    "gaussian_kernel",
    "gaussian_blur",
    "make_baseline",
    "path_point",
    "detect",
    "lam",
    "lam_with_diagnostics",
    "vanilla_gradient",
    "grad_times_input",
    "diagnostics",
    "support_window",
]

_BASELINES = ("gaussian_blur", "black")
_PATHS = ("progressive_blur", "linear")
_DETECTOR_KINDS = ("gradient_sum",)


@dataclass(frozen=True)
class PatchDetector:
    """Scalar detector over an SR-output patch.

    ``x``/``y`` are the patch's top row / left column in SR-output
    coordinates and ``side`` its edge length. The ``gradient_sum`` kind
    sums |I(i+1,j) - I(i,j)| + |I(i,j+1) - I(i,j)| over every in-patch
    pixel pair and every channel: a plain measure of local detail.
    """

    x: int
    y: int
    side: int = 16
    kind: str = "gradient_sum"

    def __post_init__(self):
        if self.kind not in _DETECTOR_KINDS:
            raise ConfigError(f"unknown detector kind {self.kind!r}")
        if self.side < 2:
            raise RangeError(f"detector patch side must be >= 2, got {self.side}")
        if self.x < 0 or self.y < 0:
            raise RangeError(f"patch corner must be non-negative, got ({self.x}, {self.y})")


@dataclass(frozen=True)
class PathConfig:
    """Baseline and path selection for one attribution run.

    ``sigma`` is the baseline blur width in LR pixels. The progressive
    blur path re-blurs the input with width sigma*(1-alpha), so it
    passes through every intermediate blur level; the linear path
    interpolates pixel values directly. ``sigma = 0`` degenerates the
    baseline to the input itself. ``blur_kernel_radius`` defaults to
    ceil(4*sigma).
    """

    baseline: str = "gaussian_blur"
    path: str = "progressive_blur"
    sigma: float = 4.0
    steps: int = 100
    blur_kernel_radius: Optional[int] = None

    def __post_init__(self):
        if self.baseline not in _BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if self.path not in _PATHS:
            raise ConfigError(f"unknown path {self.path!r}")
        if self.path == "progressive_blur" and self.baseline != "gaussian_blur":
            raise ConfigError("the progressive_blur path requires the gaussian_blur baseline")
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.blur_kernel_radius is not None and self.blur_kernel_radius < 1:
            raise ConfigError(f"blur_kernel_radius must be >= 1, got {self.blur_kernel_radius}")

    @property
    def effective_radius(self) -> int:
        if self.blur_kernel_radius is not None:
            return self.blur_kernel_radius
        return max(1, int(math.ceil(4.0 * self.sigma)))


@dataclass
class AttributionMap:
    """Result of one attribution run.

    ``values`` is the signed per-channel map over the LR input;
    ``reduced`` its channel sum. For path-integrated runs,
    ``completeness_residual`` is |sum(values) - (d_input - d_baseline)|
    relative to |d_input - d_baseline| (0.0 when both vanish); plain
    gradient methods leave the baseline fields unset.
    """

    values: np.ndarray
    reduced: np.ndarray
    completeness_residual: Optional[float]
    d_input: Optional[float]
    d_baseline: Optional[float]


@dataclass
class PathDiagnostics:
    """Per-step curves from one walk along the path, all of length steps+1.

    ``detector_curve[k]`` is the detector value at alpha = k/steps;
    ``path_speed[k]`` the L2 norm of the k-th forward difference times
    steps (the final entry repeats the last difference); and
    ``cumulative_attribution[k]`` the running attribution total after k
    steps, starting at 0.
    """

    alphas: np.ndarray
    detector_curve: np.ndarray
    path_speed: np.ndarray
    cumulative_attribution: np.ndarray


# ------------------------------------------------------------------- blurring


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Normalized 1-D Gaussian sampled on [-radius, radius], float64."""
    if sigma <= 0:
        raise ConfigError(f"gaussian_kernel needs sigma > 0, got {sigma}")
    if radius < 1:
        raise ConfigError(f"gaussian_kernel needs radius >= 1, got {radius}")
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """Depthwise Gaussian blur of a (c,h,w) image with reflect padding.

    Separable application of the normalized 2-D kernel (the outer
    product of two 1-D kernels), accumulated in float64 and rounded to
    float32 once. ``sigma = 0`` returns the input unchanged.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise RangeError(f"gaussian_blur expects a (c,h,w) image, got shape {image.shape}")
    if sigma == 0:
        return image.astype(np.float32, copy=True)
    if radius >= min(image.shape[1], image.shape[2]):
        raise DimensionError(
            f"blur radius {radius} needs an image side above {radius}, got "
            f"{image.shape[1]}x{image.shape[2]}; lower sigma or blur_kernel_radius")
    kernel = gaussian_kernel(sigma, radius)
    work = image.astype(np.float64)
    for axis in (1, 2):
        pad = [(0, 0), (0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(work, pad, mode="reflect")
        acc = np.zeros_like(work)
        for tap, weight in enumerate(kernel):
            sliced = [slice(None)] * 3
            sliced[axis] = slice(tap, tap + work.shape[axis])
            acc += weight * padded[tuple(sliced)]
        work = acc
    return work.astype(np.float32)


def make_baseline(lr: np.ndarray, cfg: PathConfig) -> np.ndarray:
    """The path's starting image: blurred input, or black."""
    lr = _check_image(lr)
    if cfg.baseline == "black":
        return np.zeros_like(lr, dtype=np.float32)
    return gaussian_blur(lr, cfg.sigma, cfg.effective_radius)


def path_point(lr: np.ndarray, cfg: PathConfig, alpha: float) -> np.ndarray:
    """The path image gamma(alpha); alpha=0 is the baseline, alpha=1 the input."""
    lr = _check_image(lr)
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"alpha must lie in [0, 1], got {alpha}")
    if cfg.path == "progressive_blur":
        return gaussian_blur(lr, cfg.sigma * (1.0 - alpha), cfg.effective_radius)
    base = make_baseline(lr, cfg)
    mixed = base.astype(np.float64) + alpha * (lr.astype(np.float64) - base.astype(np.float64))
    return mixed.astype(np.float32)


def _check_image(lr: np.ndarray) -> np.ndarray:
    arr = np.asarray(lr, dtype=np.float32)
    if arr.ndim != 3:
        raise RangeError(f"expected a (c,h,w) image, got shape {arr.shape}")
    return arr


# ------------------------------------------------------------------- detector


def detect(sr: Tensor, det: PatchDetector) -> Tensor:
    """Detector value over the patch, as a scalar tensor on the graph."""
    _, h, w = sr.shape
    if det.x + det.side > h or det.y + det.side > w:
        raise RangeError(
            f"patch ({det.x},{det.y}) side {det.side} exceeds SR output {h}x{w}")
    patch = sr[:, det.x:det.x + det.side, det.y:det.y + det.side]
    dv = patch[:, 1:, :] - patch[:, :-1, :]
    dh = patch[:, :, 1:] - patch[:, :, :-1]
    return abs(dv).sum() + abs(dh).sum()


# ---------------------------------------------------------------- attribution


def lam(net, lr: np.ndarray, det: PatchDetector, cfg: PathConfig) -> AttributionMap:
    """Path-integrated gradient attribution of the detector onto the LR input."""
    attribution, _ = lam_with_diagnostics(net, lr, det, cfg)
    return attribution


def lam_with_diagnostics(net, lr: np.ndarray, det: PatchDetector,
                         cfg: PathConfig) -> tuple[AttributionMap, PathDiagnostics]:
    """One path walk producing both the attribution map and its diagnostics."""
    lr = _check_image(lr)
    m = cfg.steps
    points = [path_point(lr, cfg, k / m) for k in range(m + 1)]

    values = np.zeros(lr.shape, dtype=np.float64)
    curve = np.empty(m + 1, dtype=np.float64)
    speed = np.empty(m + 1, dtype=np.float64)
    step_totals = np.empty(m, dtype=np.float64)
    for k in range(m):
        grad, curve[k] = _detector_gradient(net, points[k], det)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient at path step {k}")
        delta = points[k + 1].astype(np.float64) - points[k].astype(np.float64)
        contribution = grad.astype(np.float64) * delta
        values += contribution
        step_totals[k] = contribution.sum()
        speed[k] = math.sqrt(np.sum(delta * delta)) * m
    curve[m] = _detector_value(net, points[m], det)
    speed[m] = speed[m - 1]

    d_input = float(curve[m])
    d_baseline = float(curve[0])
    total = float(values.sum())
    diag = PathDiagnostics(
        alphas=np.arange(m + 1, dtype=np.float64) / m,
        detector_curve=curve,
        path_speed=speed,
        cumulative_attribution=np.concatenate(([0.0], np.cumsum(step_totals))),
    )
    attribution = AttributionMap(
        values=values,
        reduced=values.sum(axis=0),
        completeness_residual=_relative_residual(total, d_input - d_baseline),
        d_input=d_input,
        d_baseline=d_baseline,
    )
    return attribution, diag


def diagnostics(net, lr: np.ndarray, det: PatchDetector, cfg: PathConfig) -> PathDiagnostics:
    """Detector curve, path speed, and cumulative attribution along the path."""
    _, diag = lam_with_diagnostics(net, lr, det, cfg)
    return diag


def vanilla_gradient(net, lr: np.ndarray, det: PatchDetector) -> AttributionMap:
    """Plain detector gradient at the input; no baseline, no completeness."""
    lr = _check_image(lr)
    grad, value = _detector_gradient(net, lr, det)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient at the input")
    values = grad.astype(np.float64)
    return AttributionMap(values=values, reduced=values.sum(axis=0),
                          completeness_residual=None, d_input=value, d_baseline=None)


def grad_times_input(net, lr: np.ndarray, det: PatchDetector) -> AttributionMap:
    """Vanilla gradient scaled elementwise by the input."""
    lr = _check_image(lr)
    result = vanilla_gradient(net, lr, det)
    result.values = result.values * lr.astype(np.float64)
    result.reduced = result.values.sum(axis=0)
    return result


def support_window(det: PatchDetector, scale: int, rf_side: int,
                   lr_shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    """LR row/col bounds (r0, r1, c0, c1) that can influence the patch.

    The patch's LR pre-image dilated by the receptive-field radius;
    attributions outside are exactly zero for any network whose
    receptive field is ``rf_side``.
    """
    radius = (rf_side - 1) // 2
    _, h, w = lr_shape
    r0 = max(det.x // scale - radius, 0)
    r1 = min(-(-(det.x + det.side) // scale) + radius, h)
    c0 = max(det.y // scale - radius, 0)
    c1 = min(-(-(det.y + det.side) // scale) + radius, w)
    return r0, r1, c0, c1


def _detector_gradient(net, point: np.ndarray, det: PatchDetector) -> tuple[np.ndarray, float]:
    leaf = Tensor(point, requires_grad=True)
    value = detect(net.forward(leaf), det)
    value.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(point, dtype=np.float32)
    return grad, float(value.data)


def _detector_value(net, point: np.ndarray, det: PatchDetector) -> float:
    return float(detect(net.forward(Tensor(point)), det).data)


def _relative_residual(total: float, difference: float) -> float:
    if difference == 0.0:
        return 0.0 if total == 0.0 else math.inf
    return abs(total - difference) / abs(difference)
