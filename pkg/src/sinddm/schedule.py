"""Diffusion schedule and the per-scale mixing plan.

One cosine alpha-bar table is shared by every scale. What differs per
scale is (a) the timestep the reverse process starts from and (b) the
gamma table blending the blurred image into the clean one. Both are pure
functions of the pyramid's clean/blurred gap, measured as per-scale RMSE
(or a raw L2 norm behind the ``norm`` switch).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pyramid import Pyramid

__all__ = [
    "NoiseSchedule",
    "ScalePlan",
    "cosine_alpha_bar",
    "noise_ratio",
    "scale_rmse",
    "start_timesteps",
    "gamma",
    "sigma",
    "build_plan",
]

GAMMA_SAMPLE_CAP = 0.55
SIGMA_MODES = ("ddpm-scale0-only", "ddpm-all-scales")


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone alpha-bar table: ``alpha_bar[t]`` for t in 0..timesteps."""

    timesteps: int
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.alpha_bar.shape != (self.timesteps + 1,):
            raise ValueError(
                f"alpha_bar must have {self.timesteps + 1} entries; "
                f"got shape {self.alpha_bar.shape!r}"
            )


def cosine_alpha_bar(timesteps: int = 100) -> NoiseSchedule:
    """Cosine noise schedule.

    The target curve is f(t)/f(0) with
    f(t) = cos^2(((t/T + 0.008) / 1.008) * pi/2); it is realized through
    per-step betas clipped to 0.999 and re-accumulated, so alpha_bar
    stays strictly positive all the way to t = T.
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be positive; got {timesteps}")
    t = np.arange(timesteps + 1, dtype=np.float64) / timesteps
    f = np.cos((t + 0.008) / 1.008 * (np.pi / 2.0)) ** 2
    raw = f / f[0]
    beta = np.minimum(1.0 - raw[1:] / raw[:-1], 0.999)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - beta)))
    return NoiseSchedule(timesteps=timesteps, alpha_bar=alpha_bar)


def noise_ratio(alpha_bar_t: np.ndarray | float) -> np.ndarray | float:
    """Noise-to-signal amplitude sqrt((1 - alpha_bar) / alpha_bar)."""
    return np.sqrt((1.0 - alpha_bar_t) / alpha_bar_t)


def scale_rmse(pyramid: Pyramid, *, norm: str = "rmse") -> np.ndarray:
    """Per-scale distance between the clean and blurred stacks.

    ``norm="rmse"`` is the root mean squared pixel difference;
    ``norm="l2"`` is the unnormalized Frobenius norm. Index 0 is always
    exactly zero (the two stacks share the coarsest image).
    """
    if norm not in ("rmse", "l2"):
        raise ValueError(f"norm must be 'rmse' or 'l2'; got {norm!r}")
    out = np.empty(pyramid.num_scales)
    for s in range(pyramid.num_scales):
        diff = pyramid.scales[s] - pyramid.blurry[s]
        if norm == "rmse":
            out[s] = np.sqrt(np.mean(diff**2))
        else:
            out[s] = np.linalg.norm(diff)
    return out


def start_timesteps(schedule: NoiseSchedule, rmse: np.ndarray) -> np.ndarray:
    """First timestep per scale whose noise amplitude exceeds the scale's detail.

    Scale 0 always starts from the full T. For s >= 1 the start is the
    smallest t with noise_ratio(alpha_bar[t]) > rmse[s]; if the ratio
    never crosses (enormous rmse under the l2 norm, say) the scale falls
    back to the full T. rmse == 0 degenerates to t = 1.
    """
    T = schedule.timesteps
    ratios = noise_ratio(schedule.alpha_bar)
    out = np.empty(len(rmse), dtype=np.int64)
    out[0] = T
    for s in range(1, len(rmse)):
        crossed = np.nonzero(ratios > rmse[s])[0]
        out[s] = int(crossed[0]) if crossed.size else T
    return out


def gamma(
    schedule: NoiseSchedule,
    rmse_s: float,
    t: int,
    mode: str,
    scale: int,
) -> float:
    """Blur-mixing coefficient for one (scale, timestep).

    Zero at scale 0 and wherever the scale has no detail gap. Otherwise
    noise_ratio(alpha_bar[t]) / rmse_s, clamped at 1 in ``"train"`` mode
    (fully blurred input beyond the scale's start timestep) and at 0.55
    in ``"sample"`` mode.
    """
    if mode not in ("train", "sample"):
        raise ValueError(f"mode must be 'train' or 'sample'; got {mode!r}")
    if not 0 <= t <= schedule.timesteps:
        raise ValueError(f"t={t} outside [0, {schedule.timesteps}]")
    if scale == 0 or rmse_s == 0.0:
        return 0.0
    raw = noise_ratio(schedule.alpha_bar[t]) / rmse_s
    cap = 1.0 if mode == "train" else GAMMA_SAMPLE_CAP
    return float(min(raw, cap))


def sigma(schedule: NoiseSchedule, t: int, scale: int, mode: str) -> float:
    """Stochastic step size for the reverse update at timestep t.

    ``"ddpm-scale0-only"`` uses the DDPM posterior noise level at scale 0
    and deterministic steps elsewhere; ``"ddpm-all-scales"`` applies it
    everywhere (used by the text-driven modes).
    """
    if mode not in SIGMA_MODES:
        raise ValueError(f"mode must be one of {SIGMA_MODES}; got {mode!r}")
    if not 1 <= t <= schedule.timesteps:
        raise ValueError(f"t={t} outside [1, {schedule.timesteps}]; t=0 has no reverse step")
    if mode == "ddpm-scale0-only" and scale > 0:
        return 0.0
    ab = schedule.alpha_bar
    alpha_t = ab[t] / ab[t - 1]
    return float(np.sqrt((1.0 - ab[t - 1]) / (1.0 - ab[t])) * np.sqrt(1.0 - alpha_t))


@dataclass(frozen=True)
class ScalePlan:
    """Frozen per-scale tables driving training and sampling.

    gamma tables are indexed [scale][t] with t in 0..T. ``blur_free``
    marks the ablation where training (and therefore sampling) ignores the
    blurred stack entirely.
    """

    rmse: np.ndarray
    start_t: np.ndarray
    gamma_train: np.ndarray = field(repr=False)
    gamma_sample: np.ndarray = field(repr=False)
    sigma_mode: str = "ddpm-scale0-only"
    norm: str = "rmse"
    blur_free: bool = False

    @property
    def num_scales(self) -> int:
        return len(self.rmse)


def build_plan(
    pyramid: Pyramid,
    schedule: NoiseSchedule,
    *,
    norm: str = "rmse",
    sigma_mode: str = "ddpm-scale0-only",
    blur_free: bool = False,
) -> ScalePlan:
    """Derive the full ScalePlan for a pyramid under a schedule."""
    if sigma_mode not in SIGMA_MODES:
        raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}; got {sigma_mode!r}")
    rmse = scale_rmse(pyramid, norm=norm)
    start_t = start_timesteps(schedule, rmse)
    n = pyramid.num_scales
    T = schedule.timesteps
    gamma_train = np.zeros((n, T + 1))
    gamma_sample = np.zeros((n, T + 1))
    if not blur_free:
        ratios = noise_ratio(schedule.alpha_bar)
        for s in range(1, n):
            if rmse[s] == 0.0:
                continue
            raw = ratios / rmse[s]
            gamma_train[s] = np.minimum(raw, 1.0)
            gamma_sample[s] = np.minimum(raw, GAMMA_SAMPLE_CAP)
    return ScalePlan(
        rmse=rmse,
        start_t=start_t,
        gamma_train=gamma_train,
        gamma_sample=gamma_sample,
        sigma_mode=sigma_mode,
        norm=norm,
        blur_free=blur_free,
    )
