"""Coarse-to-fine reverse diffusion.

The generative pass starts from pure Gaussian noise at the coarsest scale
and walks the pyramid upward. Within a scale, each step predicts the
noise, inverts the forward construction to expose the clean estimate
behind the blur mix, re-mixes for the previous timestep, and takes a
deterministic step plus whatever stochasticity sigma allows. Between
scales, the finished estimate is upsampled and re-noised to the next
scale's start timestep, where the upsampled image itself doubles as the
blur reference.

Everything here is driven by a ``predict(x, t, s)`` callable, so the same
engine serves model sampling, guided sampling, image injections, and the
exact-inversion tests that substitute an oracle for the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .denoiser import predict_noise
from .pyramid import resize, scaled_dims
from .schedule import NoiseSchedule, sigma
from .validation import check_dims, check_rng

__all__ = [
    "SampleConfig",
    "estimate_x0",
    "ddim_step",
    "upscale_inject",
    "run_dims",
    "reverse_diffusion",
    "sample",
]


@dataclass(frozen=True)
class SampleConfig:
    """Knobs for a sampling run.

    out_dims changes the finest-scale output size (every scale's dims are
    rescaled proportionally, same rounding as training). init_dims_scale
    starts the coarsest pass at the dims of a deeper scale, which shrinks
    generated structures relative to the canvas. t_override replaces the
    per-scale start timesteps (clamped to [1, T]).
    """

    out_dims: tuple[int, int] | None = None
    init_dims_scale: int | None = None
    t_override: tuple[int | None, ...] | None = None
    sigma_mode: str | None = None
    use_ema: bool = True
    clamp_x0: bool = True


def estimate_x0(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    alpha_bar_t: float,
    gamma_t: float,
    xtilde: np.ndarray | None,
    *,
    clamp: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Invert one forward step: recover (x_mix, x0_hat) from x_t.

    x_mix is the de-noised blur mixture; x0_hat removes the blur
    reference's share. gamma must be below 1 (the sampling tables cap at
    0.55); x0_hat is clamped to [-1, 1] unless ``clamp`` is off.
    """
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must lie in (0, 1]; got {alpha_bar_t!r}")
    if gamma_t >= 1.0:
        raise ValueError(f"gamma must be below 1 when inverting; got {gamma_t!r}")
    x_mix = (x_t - math.sqrt(1.0 - alpha_bar_t) * eps_hat) / math.sqrt(alpha_bar_t)
    if gamma_t == 0.0:
        x0 = x_mix.copy()
    else:
        if xtilde is None:
            raise ValueError("gamma > 0 requires the blur reference image")
        x0 = (x_mix - gamma_t * xtilde) / (1.0 - gamma_t)
    if clamp:
        np.clip(x0, -1.0, 1.0, out=x0)
    return x_mix, x0


def ddim_step(
    x_t: np.ndarray,
    x_mix_t: np.ndarray,
    x_mix_prev: np.ndarray,
    alpha_bar_t: float,
    alpha_bar_prev: float,
    sigma_t: float,
    rng=None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse step from t to t-1.

    Deterministic direction toward x_mix_prev plus sigma_t worth of fresh
    noise. sigma_t^2 may not exceed 1 - alpha_bar_prev. No random draw
    happens when sigma_t is zero, so deterministic runs consume nothing
    from ``rng``.
    """
    var_budget = 1.0 - alpha_bar_prev - sigma_t**2
    if var_budget < -1e-9:
        raise ValueError(
            f"sigma_t={sigma_t!r} exceeds the variance budget at alpha_bar_prev={alpha_bar_prev!r}"
        )
    direction = (x_t - math.sqrt(alpha_bar_t) * x_mix_t) / math.sqrt(1.0 - alpha_bar_t)
    out = math.sqrt(alpha_bar_prev) * x_mix_prev + math.sqrt(max(var_budget, 0.0)) * direction
    if sigma_t > 0.0:
        if noise is None:
            noise = check_rng(rng).standard_normal(x_t.shape)
        out = out + sigma_t * noise
    return out


def upscale_inject(
    x0: np.ndarray,
    next_dims: tuple[int, int],
    alpha_bar_start: float,
    rng=None,
    noise: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lift a finished scale to the next one and re-noise it.

    Returns (x at the next scale's start timestep, the upsampled image
    that becomes the next scale's blur reference). Equal dims pass the
    image through untouched.
    """
    next_dims = check_dims(next_dims, "next_dims")
    if next_dims[0] < x0.shape[0] or next_dims[1] < x0.shape[1]:
        raise ValueError(
            f"next_dims {next_dims} may not shrink below the current dims {x0.shape[:2]}"
        )
    xtilde = resize(x0, next_dims)
    if noise is None:
        noise = check_rng(rng).standard_normal(xtilde.shape)
    x_start = (
        math.sqrt(alpha_bar_start) * xtilde
        + math.sqrt(1.0 - alpha_bar_start) * noise
    )
    return x_start, xtilde


def run_dims(
    train_dims: list[tuple[int, int]],
    out_dims: tuple[int, int] | None = None,
    init_dims_scale: int | None = None,
) -> list[tuple[int, int]]:
    """Resolve the per-scale canvas sizes for a sampling run."""
    n = len(train_dims)
    finest = train_dims[-1]
    if out_dims is not None:
        oh, ow = check_dims(out_dims, "out_dims")
        fh, fw = oh / finest[0], ow / finest[1]
    else:
        fh = fw = 1.0
    dims = [scaled_dims(d, fh, fw) for d in train_dims]
    if init_dims_scale is not None:
        if not 0 <= init_dims_scale < n:
            raise ValueError(f"init_dims_scale must lie in [0, {n - 1}]")
        dims = [dims[max(s, init_dims_scale)] for s in range(n)]
    if min(dims[0]) < 8:
        raise ValueError(
            f"requested output leaves the coarsest scale at {dims[0]}, below the 8x8 minimum"
        )
    return dims


def reverse_diffusion(
    predict,
    schedule: NoiseSchedule,
    gamma_table: np.ndarray,
    dims: list[tuple[int, int]],
    *,
    sigma_fn,
    rng,
    start_t: list[int] | np.ndarray,
    start_scale: int = 0,
    x_init: np.ndarray | None = None,
    xtilde_init: np.ndarray | None = None,
    clamp_x0: bool = True,
    x0_hook=None,
    scale_end_hook=None,
) -> np.ndarray:
    """Run the reverse process from ``start_scale`` to the finest scale.

    ``predict(x, t, s)`` supplies noise estimates; ``sigma_fn(t, s)`` the
    stochastic step size. ``x0_hook(s, t, x0_hat)`` may rewrite the clean
    estimate before it is re-mixed (guidance hangs off this);
    ``scale_end_hook(s, x0)`` observes each scale's final image.
    """
    rng = check_rng(rng)
    num_scales = len(dims)
    if gamma_table.shape[0] != num_scales:
        raise ValueError("gamma table and dims describe different scale counts")
    if not 0 <= start_scale < num_scales:
        raise ValueError(f"start_scale must lie in [0, {num_scales - 1}]")
    ab = schedule.alpha_bar
    x = x_init
    if x is None:
        x = rng.standard_normal(dims[start_scale] + (3,))
    xtilde = xtilde_init
    for s in range(start_scale, num_scales):
        t_start = int(start_t[s])
        if not 1 <= t_start <= schedule.timesteps:
            raise ValueError(f"start timestep {t_start} at scale {s} outside [1, T]")
        if xtilde is None and np.any(gamma_table[s, : t_start + 1] != 0.0):
            raise ValueError(f"scale {s} mixes in a blur reference but none was given")
        for t in range(t_start, 0, -1):
            eps_hat = predict(x, t, s)
            x_mix, x0 = estimate_x0(
                x, eps_hat, ab[t], gamma_table[s, t], xtilde, clamp=clamp_x0
            )
            if x0_hook is not None:
                x0 = x0_hook(s, t, x0)
            g_prev = gamma_table[s, t - 1]
            x_mix_prev = x0 if g_prev == 0.0 else g_prev * xtilde + (1.0 - g_prev) * x0
            x = ddim_step(x, x_mix, x_mix_prev, ab[t], ab[t - 1], sigma_fn(t, s), rng)
        if scale_end_hook is not None:
            scale_end_hook(s, x)
        if s + 1 < num_scales:
            x, xtilde = upscale_inject(x, dims[s + 1], ab[int(start_t[s + 1])], rng)
    return x


def sample(
    ckpt: Checkpoint,
    cfg: SampleConfig | None = None,
    rng=None,
    *,
    model=None,
    scale_outputs: dict | None = None,
) -> np.ndarray:
    """Draw one image from a trained checkpoint.

    Pass ``scale_outputs`` (a dict) to also receive each scale's final
    clean estimate, keyed by scale index. ``model`` short-circuits the
    weight rebuild when sampling repeatedly from one checkpoint.
    """
    cfg = cfg or SampleConfig()
    rng = check_rng(rng)
    if model is None:
        model = ckpt.build_model(use_ema=cfg.use_ema)
    dims = run_dims(ckpt.rebuild_pyramid().dims, cfg.out_dims, cfg.init_dims_scale)
    start_t = _resolve_start_t(ckpt, cfg.t_override)
    mode = cfg.sigma_mode or ckpt.plan.sigma_mode

    def hook(s, x0):
        if scale_outputs is not None:
            scale_outputs[s] = x0.copy()

    return reverse_diffusion(
        lambda x, t, s: predict_noise(model, x, t, s),
        ckpt.schedule,
        ckpt.plan.gamma_sample,
        dims,
        sigma_fn=lambda t, s: sigma(ckpt.schedule, t, s, mode),
        rng=rng,
        start_t=start_t,
        clamp_x0=cfg.clamp_x0,
        scale_end_hook=hook,
    )


def _resolve_start_t(ckpt: Checkpoint, t_override) -> np.ndarray:
    start_t = ckpt.plan.start_t.copy()
    if t_override is not None:
        if len(t_override) != len(start_t):
            raise ValueError(
                f"t_override must list one entry per scale ({len(start_t)}); got {len(t_override)}"
            )
        for s, t in enumerate(t_override):
            if t is not None:
                start_t[s] = min(max(int(t), 1), ckpt.timesteps)
    return start_t
