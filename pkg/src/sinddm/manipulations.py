"""Image manipulations built on mid-pyramid injection.

Instead of starting from noise at the coarsest scale, an external image
is noised to a chosen (scale, timestep) and handed to the reverse
process from there. How much gets repainted falls out of where the
injection lands: deep and noisy reinvents layout, shallow and mild only
re-textures. The blur mix is disabled at the injection scale since the
injected image has no blurred counterpart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .denoiser import predict_noise
from .guidance import GuidanceConfig, guided_sample
from .pyramid import histogram_match, resize
from .sampler import SampleConfig, _resolve_start_t, reverse_diffusion, run_dims
from .schedule import sigma
from .validation import check_image, check_rng

__all__ = [
    "InjectionSpec",
    "inject_sample",
    "style_transfer",
    "harmonize",
    "text_style_transfer",
]


@dataclass(frozen=True)
class InjectionSpec:
    """Where an external image enters the reverse process.

    ``scale=None`` defaults to the second-finest scale; ``t=None`` to
    half that scale's start timestep (at least 1). ``match_histogram``
    remaps the injected image's per-channel distribution to the training
    image's before noising.
    """

    scale: int | None = None
    t: int | None = None
    match_histogram: bool = False

    def resolve(self, ckpt: Checkpoint) -> tuple[int, int]:
        n = ckpt.num_scales
        s = self.scale if self.scale is not None else max(0, n - 2)
        if not 0 <= s < n:
            raise ValueError(f"injection scale {s} outside [0, {n - 1}]")
        limit = int(ckpt.plan.start_t[s])
        t = self.t if self.t is not None else max(1, round(0.5 * limit))
        if t == 0:
            raise ValueError("t=0 injection is a no-op round trip; use t >= 1")
        if not 1 <= t <= limit:
            raise ValueError(
                f"injection timestep {t} outside [1, {limit}] for scale {s}"
            )
        return s, int(t)


def inject_sample(
    ckpt: Checkpoint,
    img: np.ndarray,
    injection: InjectionSpec | None = None,
    rng=None,
    *,
    model=None,
    out_dims: tuple[int, int] | None = None,
) -> np.ndarray:
    """Noise ``img`` to the injection point and finish the reverse process.

    The output canvas follows ``img``'s dims (the whole pyramid ladder is
    rescaled to its aspect ratio) unless ``out_dims`` overrides it.
    """
    rng = check_rng(rng)
    injection = injection or InjectionSpec()
    img = check_image(img, "img")
    s0, t0 = injection.resolve(ckpt)
    if model is None:
        model = ckpt.build_model(use_ema=True)
    dims = run_dims(ckpt.rebuild_pyramid().dims, out_dims or img.shape[:2])
    start_t = _resolve_start_t(ckpt, None)
    start_t[s0] = t0

    seed_img = resize(img, dims[s0])
    if injection.match_histogram:
        seed_img = histogram_match(seed_img, ckpt.train_image)
    ab = ckpt.schedule.alpha_bar[t0]
    noise = rng.standard_normal(seed_img.shape)
    x_init = math.sqrt(ab) * seed_img + math.sqrt(1.0 - ab) * noise

    gamma_table = ckpt.plan.gamma_sample.copy()
    gamma_table[s0, :] = 0.0
    mode = ckpt.plan.sigma_mode
    return reverse_diffusion(
        lambda x, t, s: predict_noise(model, x, t, s),
        ckpt.schedule,
        gamma_table,
        dims,
        sigma_fn=lambda t, s: sigma(ckpt.schedule, t, s, mode),
        rng=rng,
        start_t=start_t,
        start_scale=s0,
        x_init=x_init,
    )


def style_transfer(
    ckpt: Checkpoint,
    content: np.ndarray,
    injection: InjectionSpec | None = None,
    rng=None,
    **kwargs,
) -> np.ndarray:
    """Repaint ``content`` in the look of the training image.

    The checkpoint must have been trained on the style source. Content is
    histogram-matched to it before injection so the model starts from
    familiar statistics; layout survives, appearance does not.
    """
    injection = injection or InjectionSpec(match_histogram=True)
    if not injection.match_histogram:
        injection = InjectionSpec(injection.scale, injection.t, True)
    return inject_sample(ckpt, content, injection, rng, **kwargs)


def harmonize(
    ckpt: Checkpoint,
    composite: np.ndarray,
    injection: InjectionSpec | None = None,
    rng=None,
    **kwargs,
) -> np.ndarray:
    """Blend a pasted object into the training image's look.

    ``composite`` is the training image with the foreign content already
    pasted in. No histogram matching here: the paste should keep its
    colors and only pick up the surrounding texture.
    """
    injection = injection or InjectionSpec()
    if injection.match_histogram:
        injection = InjectionSpec(injection.scale, injection.t, False)
    return inject_sample(ckpt, composite, injection, rng, **kwargs)


def text_style_transfer(
    ckpt: Checkpoint,
    prompt: str,
    embedder,
    rng=None,
    cfg: GuidanceConfig | None = None,
    entry_t: int | None = None,
    *,
    model=None,
) -> np.ndarray:
    """Restyle the training image itself from a text prompt.

    The training image is injected at the finest scale (its own start
    timestep by default) and denoised under style-mode guidance, so only
    fine texture moves while the layout stays put.
    """
    rng = check_rng(rng)
    if cfg is None:
        cfg = GuidanceConfig(mode="style", prompt=prompt)
    elif cfg.mode != "style" or cfg.prompt != prompt:
        raise ValueError("cfg must be a style-mode config carrying the same prompt")
    finest = ckpt.num_scales - 1
    t0 = int(ckpt.plan.start_t[finest]) if entry_t is None else int(entry_t)
    t0 = min(max(t0, 1), ckpt.timesteps)
    ab = ckpt.schedule.alpha_bar[t0]
    noise = check_rng(rng).standard_normal(ckpt.train_image.shape)
    x_init = math.sqrt(ab) * ckpt.train_image + math.sqrt(1.0 - ab) * noise
    return guided_sample(
        ckpt,
        cfg,
        embedder,
        rng,
        model=model,
        start_scale=finest,
        x_init=x_init,
        entry_t=t0,
    )
