"""Image rescaling and the two per-scale image stacks used everywhere else.

All geometry in the toolkit flows through this module: the bicubic kernel,
its edge policy, and the dimension rounding rule are pinned here so that
every consumer (training, sampling, guidance, metrics) sees identical
numbers. The interpolation kernel is the Keys cubic with a = -0.5, applied
separably per axis with replicate edges and per-tap weight renormalization;
downsampling widens the kernel support by the inverse scale so it acts as a
proper low-pass filter. Output values are clamped to [-1, 1] after
interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .validation import check_dims, check_image

__all__ = [
    "KEYS_A",
    "Pyramid",
    "resize",
    "nearest_resize",
    "round_half_up",
    "scaled_dims",
    "choose_num_scales",
    "build_pyramids",
    "histogram_match",
]

KEYS_A = -0.5


def round_half_up(x: float) -> int:
    """Round to nearest integer with .5 going up (never banker's rounding)."""
    return int(math.floor(x + 0.5))


def _cubic_weight(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic kernel evaluated elementwise."""
    x = np.abs(x)
    w = np.zeros_like(x)
    near = x < 1.0
    far = (x >= 1.0) & (x < 2.0)
    xn = x[near]
    xf = x[far]
    w[near] = (a + 2.0) * xn**3 - (a + 3.0) * xn**2 + 1.0
    w[far] = a * xf**3 - 5.0 * a * xf**2 + 8.0 * a * xf - 4.0 * a
    return w


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix applying 1-D bicubic resampling.

    Output sample i is placed at (i + 0.5) / scale - 0.5 in input
    coordinates (center-aligned mapping). When shrinking, the kernel is
    stretched by 1/scale for antialiasing. Taps falling outside the input
    are clamped to the border sample, and each row is normalized to sum
    to one so constants pass through exactly.
    """
    scale = n_out / n_in
    support = 2.0 if scale >= 1.0 else 2.0 / scale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    lo = np.ceil(centers - support).astype(int)
    width = int(np.floor(2.0 * support)) + 2
    taps = lo[:, None] + np.arange(width)[None, :]
    dist = centers[:, None] - taps
    weights = _cubic_weight(dist * scale if scale < 1.0 else dist)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    clamped = np.clip(taps, 0, n_in - 1)
    for i in range(n_out):
        np.add.at(mat[i], clamped[i], weights[i])
    return mat


def resize(img: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Bicubic-resample ``img`` to ``dims`` = (height, width).

    Works on (H, W, 3) arrays in [-1, 1]; the result is clamped back to
    [-1, 1] after interpolation (cubic kernels overshoot near edges).
    """
    img = check_image(img, "img")
    h, w = check_dims(dims)
    out = img
    if h != img.shape[0]:
        out = np.einsum("oh,hwc->owc", _resample_matrix(img.shape[0], h), out)
    if w != img.shape[1]:
        out = np.einsum("ow,hwc->hoc", _resample_matrix(img.shape[1], w), out)
    return np.clip(out, -1.0, 1.0)


def nearest_resize(arr: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of a 2-D array (used for masks, not images)."""
    h, w = check_dims(dims)
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array; got shape {arr.shape!r}")
    rows = np.minimum((np.arange(h) + 0.5) * arr.shape[0] / h, arr.shape[0] - 1).astype(int)
    cols = np.minimum((np.arange(w) + 0.5) * arr.shape[1] / w, arr.shape[1] - 1).astype(int)
    return arr[rows][:, cols]


def scaled_dims(base_dims: tuple[int, int], factor_h: float, factor_w: float | None = None) -> tuple[int, int]:
    """Scale (H, W) by per-axis factors with half-up rounding, floored at 1."""
    if factor_w is None:
        factor_w = factor_h
    h, w = base_dims
    return (max(1, round_half_up(h * factor_h)), max(1, round_half_up(w * factor_w)))


def choose_num_scales(
    dims: tuple[int, int],
    rf_side: int = 35,
    target_area_ratio: float = 0.4,
    scale_factor: float = 1.5,
    search_range: tuple[int, int] = (3, 8),
) -> int:
    """Pick the pyramid depth for a training image.

    Scans N in ``search_range`` (inclusive) and keeps the N whose coarsest
    scale area H*W / scale_factor^(2(N-1)) is closest to
    rf_side^2 / target_area_ratio, i.e. the denoiser's footprint covers
    about ``target_area_ratio`` of the coarsest scale. Ties go to the
    smaller N.
    """
    h, w = check_dims(dims)
    if min(h, w) <= rf_side:
        raise ValueError(
            f"image dims {dims!r} leave no room below full resolution for a "
            f"{rf_side}x{rf_side} receptive field; provide num_scales explicitly "
            "or use a larger image"
        )
    if scale_factor <= 1.0:
        raise ValueError(f"scale_factor must exceed 1; got {scale_factor!r}")
    target = rf_side**2 / target_area_ratio
    lo, hi = search_range
    best_n, best_err = lo, float("inf")
    for n in range(lo, hi + 1):
        err = abs(h * w / scale_factor ** (2 * (n - 1)) - target)
        if err < best_err:
            best_n, best_err = n, err
    return best_n


@dataclass(frozen=True)
class Pyramid:
    """Clean and blurred image stacks, coarsest (index 0) to finest.

    ``scales[s]`` is the training image resampled to scale s.
    ``blurry[s]`` is the detail-stripped counterpart: scale s-1 upsampled
    back to the dims of scale s (and ``blurry[0] == scales[0]``). The gap
    between the two stacks is what drives the per-scale noise schedule.
    """

    scale_factor: float
    scales: list[np.ndarray] = field(repr=False)
    blurry: list[np.ndarray] = field(repr=False)

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [s.shape[:2] for s in self.scales]


def build_pyramids(img: np.ndarray, scale_factor: float, num_scales: int) -> Pyramid:
    """Construct the clean/blurred stacks for a training image.

    Scale s has dims round_half_up(full_dims * scale_factor^(s - N + 1))
    per axis, floored at 1 pixel. The coarsest scale must keep at least
    8 x 8 pixels; otherwise a smaller ``num_scales`` is suggested.
    """
    img = check_image(img, "img")
    if num_scales < 2:
        raise ValueError(f"num_scales must be at least 2; got {num_scales}")
    if scale_factor <= 1.0:
        raise ValueError(f"scale_factor must exceed 1; got {scale_factor!r}")
    full = img.shape[:2]
    dims = [
        scaled_dims(full, scale_factor ** (s - num_scales + 1))
        for s in range(num_scales)
    ]
    if min(dims[0]) < 8:
        fit = 1
        while True:
            d = scaled_dims(full, scale_factor ** (-fit))
            if min(d) < 8:
                break
            fit += 1
        raise ValueError(
            f"coarsest scale {dims[0]} is below 8x8; use num_scales <= {fit} "
            f"for a {full[0]}x{full[1]} image at scale_factor {scale_factor}"
        )
    scales = [resize(img, d) for d in dims]
    blurry = [scales[0]] + [
        resize(scales[s - 1], dims[s]) for s in range(1, num_scales)
    ]
    return Pyramid(scale_factor=scale_factor, scales=scales, blurry=blurry)


def histogram_match(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Remap ``source`` so each channel's value distribution matches ``reference``.

    Classic rank mapping: sort both pixel populations per channel and hand
    the i-th ranked source pixel the reference value at the proportional
    rank. Spatial structure (the rank order of pixels) is untouched.
    """
    source = check_image(source, "source")
    reference = check_image(reference, "reference")
    out = np.empty_like(source)
    n_src = source.shape[0] * source.shape[1]
    n_ref = reference.shape[0] * reference.shape[1]
    ref_pick = (np.arange(n_src) * n_ref) // n_src
    for c in range(3):
        src = source[:, :, c].ravel()
        order = np.argsort(src, kind="stable")
        ref_sorted = np.sort(reference[:, :, c].ravel())
        matched = np.empty(n_src)
        matched[order] = ref_sorted[ref_pick]
        out[:, :, c] = matched.reshape(source.shape[:2])
    return out
