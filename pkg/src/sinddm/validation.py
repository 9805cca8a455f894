"""Input validation helpers shared by the public entry points."""

from __future__ import annotations

import numbers

import numpy as np

__all__ = [
    "check_image",
    "check_mask",
    "check_dims",
    "check_rng",
    "check_fraction",
]


def check_image(img, name: str = "image", *, allow_any_range: bool = False) -> np.ndarray:
    """Validate an H x W x 3 image array and return it as float64.

    Parameters
    ----------
    img : array-like
        Candidate image. Must be rank 3 with three channels, finite, and
        (unless ``allow_any_range``) inside [-1, 1].
    name : str
        Name used in error messages.
    allow_any_range : bool
        Skip the range check for intermediates that legitimately leave
        [-1, 1] (noisy mixtures, gradients).
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(
            f"{name} must have shape (H, W, 3); got {arr.shape!r}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one pixel; got {arr.shape!r}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if not allow_any_range and (arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6):
        raise ValueError(
            f"{name} values must lie in [-1, 1]; got range "
            f"[{arr.min():.4f}, {arr.max():.4f}]"
        )
    return arr


def check_mask(mask, name: str = "mask", *, dims: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a binary H x W mask, returned as float64 in {0, 1}."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W); got {arr.shape!r}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    uniq = np.unique(arr)
    if not np.all(np.isin(uniq, (0.0, 1.0))):
        raise ValueError(f"{name} must be binary (0/1); got values {uniq[:8]!r}")
    if dims is not None and arr.shape != tuple(dims):
        raise ValueError(f"{name} must have dims {tuple(dims)}; got {arr.shape!r}")
    return arr


def check_dims(dims, name: str = "dims") -> tuple[int, int]:
    """Validate an (H, W) pair of positive integers."""
    try:
        h, w = dims
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a (height, width) pair; got {dims!r}") from None
    for v, axis in ((h, "height"), (w, "width")):
        if not isinstance(v, numbers.Integral) or isinstance(v, bool) or v < 1:
            raise ValueError(f"{name} {axis} must be a positive integer; got {v!r}")
    return int(h), int(w)


def check_rng(rng) -> np.random.Generator:
    """Coerce ``rng`` (Generator | int seed | None) into a Generator."""
    if rng is None:
        return np.random.default_rng()
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, numbers.Integral) and not isinstance(rng, bool):
        return np.random.default_rng(int(rng))
    raise TypeError(f"rng must be a numpy Generator, an int seed, or None; got {type(rng)!r}")


def check_fraction(value, name: str, *, low: float = 0.0, high: float = 1.0) -> float:
    """Validate a scalar inside [low, high]."""
    v = float(value)
    if not np.isfinite(v) or v < low or v > high:
        raise ValueError(f"{name} must lie in [{low}, {high}]; got {value!r}")
    return v
