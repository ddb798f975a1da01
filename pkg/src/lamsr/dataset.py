"""Image I/O, anti-aliased bicubic downsampling, and test-set curation.

Images travel through the package as (c,h,w) float32 arrays scaled to
[0, 1], c in {1, 3}. On disk they are 8-bit PNG or binary PPM/PGM;
writing then reading a value k/255 is bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .analysis import average_ranks, psnr
from .attribution import PatchDetector
from .engine import Tensor
from .errors import ConfigError, DataError, DecodeError, DimensionError

__all__ = [
    "ImageRecord",
    "CandidateScore",
    "CurationReport",
    "load_image",
    "save_image",
    "downsample",
    "cubic",
    "enumerate_candidates",
    "rank_candidates",
    "curate",
]

_IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")

# PSNR is unbounded for an exact reconstruction; curation clamps it here
# so rank statistics stay finite.
PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class ImageRecord:
    """One curated image: HR crop, its LR version, and a centered detector."""

    image_id: str
    hr: np.ndarray
    lr: np.ndarray
    scale: int
    center_patch: PatchDetector


@dataclass(frozen=True)
class CandidateScore:
    image_id: str
    mean_psnr_db: float
    var_psnr: float
    rank: int
    selected: bool


@dataclass(frozen=True)
class CurationReport:
    candidates: list[CandidateScore]
    selected_ids: list[str]


# ----------------------------------------------------------------------- I/O


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB or grayscale PNG/PPM as (c,h,w) float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode not in ("L", "RGB"):
                raise DecodeError(
                    f"{path}: unsupported image mode {mode!r}; only 8-bit RGB or "
                    "grayscale is accepted")
            arr = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    scaled = arr.astype(np.float32) / np.float32(255.0)
    if scaled.ndim == 2:
        return scaled[None, :, :]
    return np.ascontiguousarray(scaled.transpose(2, 0, 1))


def save_image(values: np.ndarray, path) -> None:
    """Write a (c,h,w) or (h,w) float array in [0, 1] as an 8-bit image."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DimensionError(f"save_image expects (c,h,w) with c in {{1,3}}, got {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if quantized.shape[0] == 1:
        img = Image.fromarray(quantized[0], mode="L")
    else:
        img = Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
    img.save(path)


# ---------------------------------------------------------------- resampling


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic interpolation kernel with parameter ``a``."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    inner = ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0
    outer = a * (((ax - 5.0) * ax + 8.0) * ax - 4.0)
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _resample_taps(n_out: int, n_in: int, scale: int) -> tuple[np.ndarray, np.ndarray]:
    # Anti-aliased decimation: stretch the kernel by the scale factor and
    # normalize each output row. Source coordinates use pixel centers,
    # u = (i + 0.5) * scale - 0.5; out-of-range taps clamp to the edge.
    taps = int(math.ceil(4.0 * scale)) + 2
    i = np.arange(n_out, dtype=np.float64)
    u = (i + 0.5) * scale - 0.5
    left = np.floor(u - 2.0 * scale).astype(np.int64) + 1
    offsets = np.arange(taps, dtype=np.int64)
    idx = left[:, None] + offsets[None, :]
    weights = cubic((u[:, None] - idx) / scale) / scale
    weights /= weights.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), weights


def downsample(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic decimation by an integer factor with anti-alias prefiltering.

    Output values clamp to [0, 1]. ``scale = 1`` is the identity.
    """
    arr = np.asarray(hr, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"downsample expects (c,h,w), got shape {arr.shape}")
    if scale < 1:
        raise ConfigError(f"downsample scale must be >= 1, got {scale}")
    _, h, w = arr.shape
    if h % scale or w % scale:
        raise DimensionError(f"image {h}x{w} is not divisible by scale {scale}")
    if scale == 1:
        return arr.astype(np.float32)
    for axis, n_in in ((1, h), (2, w)):
        idx, weights = _resample_taps(n_in // scale, n_in, scale)
        # np.take expands `axis` into a (n_out, taps) pair of axes
        arr = _contract(np.take(arr, idx, axis=axis), weights, axis)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _contract(gathered: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    # Sum the tap dimension (axis+1 after take) against per-row weights.
    gathered = np.moveaxis(gathered, (axis, axis + 1), (0, 1))
    out = np.einsum("it,it...->i...", weights, gathered)
    return np.moveaxis(out, 0, axis)


# ------------------------------------------------------------------- curation


def enumerate_candidates(hr_dir, sub_image: int, scale: int, seed: int
                         ) -> list[tuple[str, np.ndarray]]:
    """Deterministic grid-jittered crops from every image in a directory.

    Each image is tiled into sub_image-sized cells; every cell yields one
    crop shifted by a seeded jitter of up to half a cell, clamped to stay
    inside the image. Candidate ids encode the crop position, so the same
    (directory, sub_image, scale, seed) always reproduces the same crops.
    """
    if sub_image % scale:
        raise ConfigError(f"sub_image {sub_image} must be divisible by scale {scale}")
    paths = sorted(p for p in Path(hr_dir).iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not paths:
        raise DataError(f"no images found under {hr_dir}")
    rng = np.random.default_rng(seed)
    crops: list[tuple[str, np.ndarray]] = []
    for path in paths:
        image = load_image(path)
        if image.shape[0] == 1:
            image = np.repeat(image, 3, axis=0)
        _, h, w = image.shape
        for row in range(h // sub_image):
            for col in range(w // sub_image):
                jitter_r = int(rng.integers(0, sub_image // 2 + 1))
                jitter_c = int(rng.integers(0, sub_image // 2 + 1))
                r0 = min(row * sub_image + jitter_r, h - sub_image)
                c0 = min(col * sub_image + jitter_c, w - sub_image)
                crop = image[:, r0:r0 + sub_image, c0:c0 + sub_image].copy()
                crops.append((f"{path.stem}_{r0:04d}_{c0:04d}", crop))
    return crops


def rank_candidates(psnr_matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores and selection order from a (candidates x models) PSNR matrix.

    Score = rank of negated mean PSNR + rank of PSNR variance, both with
    average ranks for ties, so candidates that are hard on average and
    disagree across models score highest. Returns (scores, order) where
    ``order`` lists candidate indices best-first, ties broken by index.
    """
    matrix = np.asarray(psnr_matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"rank_candidates expects a 2-D matrix, got {matrix.shape}")
    mean = matrix.mean(axis=1)
    variance = matrix.var(axis=1)
    scores = average_ranks(-mean) + average_ranks(variance)
    order = np.argsort(-scores, kind="stable")
    return scores, order


def curate(hr_dir, models, count: int, sub_image: int, scale: int, seed: int
           ) -> CurationReport:
    """Select the ``count`` crops the model set finds hardest and most divisive.

    Every candidate crop is downsampled, super-resolved by each model,
    and scored by PSNR against the HR crop (clamped to PSNR_CAP_DB for
    exact reconstructions). Selection follows ``rank_candidates``.
    """
    models = list(models)
    if len(models) < 2:
        raise ConfigError(f"curation needs at least 2 models, got {len(models)}")
    for model in models:
        if model.scale != scale:
            raise ConfigError(
                f"model scale {model.scale} does not match curation scale {scale}")
    candidates = enumerate_candidates(hr_dir, sub_image, scale, seed)
    if len(candidates) < count:
        raise DataError(f"only {len(candidates)} candidates for count={count}")

    matrix = np.empty((len(candidates), len(models)), dtype=np.float64)
    for i, (_, crop) in enumerate(candidates):
        lr = downsample(crop, scale)
        for j, model in enumerate(models):
            sr = np.clip(model.forward(Tensor(lr)).data, 0.0, 1.0)
            matrix[i, j] = min(psnr(sr, crop), PSNR_CAP_DB)

    _, order = rank_candidates(matrix)
    position = np.empty(len(candidates), dtype=np.int64)
    position[order] = np.arange(1, len(candidates) + 1)
    chosen = set(order[:count].tolist())
    report_rows = [
        CandidateScore(
            image_id=candidates[i][0],
            mean_psnr_db=float(matrix[i].mean()),
            var_psnr=float(matrix[i].var()),
            rank=int(position[i]),
            selected=i in chosen,
        )
        for i in range(len(candidates))
    ]
    selected_ids = [candidates[i][0] for i in order[:count]]
    return CurationReport(candidates=report_rows, selected_ids=selected_ids)


def image_record(image_id: str, hr: np.ndarray, scale: int,
                 patch_side: int = 16) -> ImageRecord:
    """Bundle an HR crop with its LR input and a centered detector patch."""
    lr = downsample(hr, scale)
    _, h, w = hr.shape
    det = PatchDetector(x=(h - patch_side) // 2, y=(w - patch_side) // 2, side=patch_side)
    return ImageRecord(image_id=image_id, hr=hr.astype(np.float32), lr=lr,
                       scale=scale, center_patch=det)
