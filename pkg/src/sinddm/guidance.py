"""Steering the sampler with masks, reference images, and text embedders.

Two families of guidance hang off the sampler's clean-estimate hook:

* image-roi: blend a target image into a masked region of the estimate
  at every scale except the finest (outpainting and region replacement).
* text modes (content, style, roi-text): push the estimate along the
  gradient of an embedder loss. These switch the whole run to the
  blur-free tables and stochastic steps at every scale, restrict edits
  to a saliency mask frozen at the first guided step, and smooth the
  unmasked region with a small momentum term.

The update inside the mask follows the replacement form
``eta * delta * grad`` with the adaptive step ``delta`` scaling the
gradient to the estimate's masked magnitude; ``descent_variant`` swaps
in the conventional ``x0 - eta * delta * grad``. When the gradient
carries no signal in the mask (or eta is zero) the estimate passes
through unchanged, so degenerate guidance reduces exactly to unguided
sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .denoiser import predict_noise
from .pyramid import nearest_resize, resize, round_half_up
from .sampler import SampleConfig, reverse_diffusion, run_dims, _resolve_start_t
from .schedule import sigma
from .validation import check_fraction, check_image, check_mask, check_rng

__all__ = [
    "GuidanceConfig",
    "DEFAULT_TEXT_TEMPLATES",
    "LOWRES_TEXT_TEMPLATES",
    "clip_loss_and_grad",
    "quantile_mask",
    "roi_update",
    "clip_update",
    "guided_sample",
]

MODES = ("content", "style", "roi-text", "image-roi")
TEXT_MODES = ("content", "style", "roi-text")

DEFAULT_TEXT_TEMPLATES = (
    "photo of {}.",
    "a photo of {}.",
    "the photo of {}.",
    "image of {}.",
    "an image of {}.",
    "high quality photo of {}.",
    "{}.",
)

# Wider template set for text guidance on small regions, where the crops
# handed to the embedder are genuinely low-resolution.
LOWRES_TEXT_TEMPLATES = (
    "photo of {}.",
    "low quality photo of {}.",
    "low resolution photo of {}.",
    "low-res photo of {}.",
    "blurry photo of {}.",
    "pixelated photo of {}.",
    "a photo of {}.",
    "the photo of {}.",
    "image of {}.",
    "an image of {}.",
    "low quality image of {}.",
    "a low quality image of {}.",
    "low resolution image of {}.",
    "a low resolution image of {}.",
    "low-res image of {}.",
    "a low-res image of {}.",
    "blurry image of {}.",
    "a blurry image of {}.",
    "pixelated image of {}.",
    "a pixelated image of {}.",
    "the {}.",
    "a {}.",
    "{}.",
    "{}",
    "{}!",
    "{}...",
)


@dataclass(frozen=True)
class GuidanceConfig:
    """Settings for one guided run.

    ``f`` is the fill factor: the fraction of pixels (by gradient
    saliency) the text modes are allowed to edit. ``eta`` scales the
    edit strength; ``lambda_momentum`` smooths the unmasked region
    between steps. ``roi`` rectangles are (top, left, height, width) in
    output coordinates. ``aug_seed`` feeds a dedicated RNG stream for
    embedder augmentations so guidance never perturbs the sampling
    trajectory's own draws.
    """

    mode: str = "content"
    prompt: str = ""
    f: float = 0.3
    eta: float = 0.3
    lambda_momentum: float = 0.05
    start_scale: int = 1
    free_final_steps: int = 3
    descent_variant: bool = False
    roi: tuple[int, int, int, int] | None = None
    target_image: np.ndarray | None = field(default=None, repr=False)
    target_mask: np.ndarray | None = field(default=None, repr=False)
    n_crops: int = 16
    crop_scale: tuple[float, float] = (0.5, 1.0)
    hflip: bool = True
    templates: tuple[str, ...] | None = None
    aug_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}; got {self.mode!r}")
        check_fraction(self.f, "f")
        check_fraction(self.eta, "eta")
        check_fraction(self.lambda_momentum, "lambda_momentum")

    def resolved_templates(self) -> tuple[str, ...]:
        if self.templates is not None:
            return tuple(self.templates)
        return LOWRES_TEXT_TEMPLATES if self.mode == "roi-text" else DEFAULT_TEXT_TEMPLATES


def quantile_mask(saliency: np.ndarray, f: float) -> np.ndarray:
    """Binary mask of the top-f fraction of saliency values.

    Exactly round(f * size) pixels are selected, ties broken in scan
    order, except that pixels with zero saliency are never selected:
    a gradient that carries no signal guides nothing.
    """
    check_fraction(f, "f")
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.ndim != 2:
        raise ValueError(f"saliency must be 2-D; got shape {sal.shape!r}")
    if sal.min() < 0.0:
        raise ValueError("saliency must be non-negative")
    flat = sal.ravel()
    k = int(round(f * flat.size))
    k = min(k, int(np.count_nonzero(flat)))
    mask = np.zeros(flat.size)
    if k > 0:
        order = np.argsort(-flat, kind="stable")
        mask[order[:k]] = 1.0
    return mask.reshape(sal.shape)


def roi_update(x0: np.ndarray, target: np.ndarray, mask: np.ndarray, eta: float) -> np.ndarray:
    """Pull the masked region of x0 toward target with strength eta."""
    eta = check_fraction(eta, "eta")
    m = check_mask(mask, dims=x0.shape[:2])[:, :, None]
    if target.shape != x0.shape:
        raise ValueError(
            f"target shape {target.shape!r} does not match estimate shape {x0.shape!r}"
        )
    return m * ((1.0 - eta) * x0 + eta * target) + (1.0 - m) * x0


def clip_update(
    x0: np.ndarray,
    x0_prev: np.ndarray,
    grad: np.ndarray,
    mask: np.ndarray,
    eta: float,
    lambda_momentum: float,
    *,
    descent_variant: bool = False,
) -> np.ndarray:
    """Apply one text-guidance edit to the clean estimate.

    Inside the mask the estimate becomes ``eta * delta * grad`` (or the
    descent form ``x0 - eta * delta * grad``), with
    ``delta = ||x0 * m|| / ||grad * m||`` matching the edit's magnitude
    to the image's. Outside the mask the estimate is smoothed toward the
    previous step's. With eta == 0 or a gradient that vanishes on the
    mask, the masked region keeps x0 (delta is zero there anyway), so
    guidance degenerates cleanly to a no-op as lambda_momentum -> 1.
    """
    eta = check_fraction(eta, "eta")
    lam = check_fraction(lambda_momentum, "lambda_momentum")
    m = check_mask(mask, dims=x0.shape[:2])[:, :, None]
    grad_norm = float(np.linalg.norm(grad * m))
    if eta == 0.0 or grad_norm == 0.0:
        inside = x0
    else:
        delta = float(np.linalg.norm(x0 * m)) / grad_norm
        step = eta * delta * grad
        inside = (x0 - step) if descent_variant else step
    outside = lam * x0 + (1.0 - lam) * x0_prev
    return m * inside + (1.0 - m) * outside


def clip_loss_and_grad(
    embedder,
    image: np.ndarray,
    prompt: str,
    cfg: GuidanceConfig,
    aug_rng,
    *,
    roi: tuple[int, int, int, int] | None = None,
    text_embeddings: torch.Tensor | None = None,
) -> tuple[float, np.ndarray]:
    """Average embedding distance between image crops and prompt variants.

    Crops are drawn from ``image`` (or its ``roi`` rectangle), randomly
    flipped, and resized to the embedder's native resolution; the loss is
    the mean cosine distance against every text template. Returns the
    scalar loss and its gradient w.r.t. the full image (zero outside the
    ROI when one is given).
    """
    aug_rng = check_rng(aug_rng)
    arr = check_image(image, "image", allow_any_range=True)
    x = torch.from_numpy(arr.transpose(2, 0, 1)).float().requires_grad_(True)
    region = x
    if roi is not None:
        top, left, rh, rw = _validate_roi(roi, arr.shape[:2])
        region = x[:, top : top + rh, left : left + rw]
    h, w = region.shape[1], region.shape[2]
    res = embedder.native_resolution
    crops = []
    lo, hi = cfg.crop_scale
    for _ in range(max(1, cfg.n_crops)):
        frac = float(aug_rng.uniform(lo, hi))
        ch = max(1, round_half_up(frac * h))
        cw = max(1, round_half_up(frac * w))
        top_i = int(aug_rng.integers(0, h - ch + 1))
        left_i = int(aug_rng.integers(0, w - cw + 1))
        crop = region[:, top_i : top_i + ch, left_i : left_i + cw]
        if cfg.hflip and aug_rng.random() < 0.5:
            crop = torch.flip(crop, dims=[-1])
        crops.append(
            F.interpolate(
                crop[None], size=(res, res), mode="bilinear", align_corners=False
            )[0]
        )
    batch = torch.stack(crops)
    img_emb = embedder.embed_image(batch)
    if text_embeddings is None:
        templates = cfg.resolved_templates()
        text_embeddings = embedder.embed_text([tp.format(prompt) for tp in templates])
    txt = text_embeddings.to(img_emb.dtype)
    loss = (1.0 - img_emb @ txt.T).mean()
    if loss.requires_grad:
        loss.backward()
        grad = x.grad.detach().double().numpy().transpose(1, 2, 0)
    else:
        grad = np.zeros_like(arr)
    return float(loss.detach()), grad


def _validate_roi(roi, dims) -> tuple[int, int, int, int]:
    top, left, rh, rw = (int(v) for v in roi)
    if rh < 1 or rw < 1:
        raise ValueError(f"roi height/width must be positive; got {roi!r}")
    if top < 0 or left < 0 or top + rh > dims[0] or left + rw > dims[1]:
        raise ValueError(f"roi {roi!r} falls outside image dims {tuple(dims)}")
    return top, left, rh, rw


def _scale_roi(roi, from_dims, to_dims) -> tuple[int, int, int, int]:
    top, left, rh, rw = roi
    fh = to_dims[0] / from_dims[0]
    fw = to_dims[1] / from_dims[1]
    sh = max(1, round_half_up(rh * fh))
    sw = max(1, round_half_up(rw * fw))
    st = min(max(0, round_half_up(top * fh)), to_dims[0] - sh)
    sl = min(max(0, round_half_up(left * fw)), to_dims[1] - sw)
    return st, sl, sh, sw


class _TextGuide:
    """Stateful hook applying text guidance along the reverse trajectory.

    Owns the saliency mask (created at the first guided step, then only
    ever upsampled), the momentum buffer (reset at scale boundaries), and
    a dedicated augmentation RNG so the sampling stream stays untouched.
    """

    def __init__(self, ckpt, cfg, embedder, dims, start_t, trace):
        self.cfg = cfg
        self.embedder = embedder
        self.dims = dims
        self.start_t = start_t
        self.timesteps = ckpt.timesteps
        self.num_scales = len(dims)
        self.trace = trace
        self.aug_rng = np.random.default_rng(cfg.aug_seed)
        self.mask: np.ndarray | None = None
        self.x0_prev: np.ndarray | None = None
        self.current_scale: int | None = None
        self._text_emb: torch.Tensor | None = None

    def _guided(self, s: int, t: int) -> bool:
        cfg = self.cfg
        finest = self.num_scales - 1
        if cfg.mode == "style":
            if s != finest:
                return False
        elif s < cfg.start_scale:
            return False
        if s == finest and t <= cfg.free_final_steps:
            return False
        if cfg.start_scale == 0 and s == 0:
            # The first half of the coarsest pass stays purely generative.
            if t > self.start_t[0] - self.timesteps // 2:
                return False
        return True

    def _mask_for(self, s: int, saliency: np.ndarray) -> np.ndarray:
        if self.mask is None:
            self.mask = quantile_mask(saliency, self.cfg.f)
            self._note("mask-created", s, fraction=float(self.mask.mean()))
        elif self.mask.shape != self.dims[s]:
            self.mask = (nearest_resize(self.mask, self.dims[s]) >= 0.5).astype(np.float64)
            self._note("mask-upsampled", s, fraction=float(self.mask.mean()))
        return self.mask

    def _note(self, event: str, s: int, **extra):
        if self.trace is not None:
            mask = self.mask
            self.trace.append(
                {
                    "event": event,
                    "scale": s,
                    "mask_checksum": None if mask is None else float(mask.sum()),
                    **extra,
                }
            )

    def _texts(self) -> torch.Tensor:
        if self._text_emb is None:
            templates = self.cfg.resolved_templates()
            self._text_emb = self.embedder.embed_text(
                [tp.format(self.cfg.prompt) for tp in templates]
            )
        return self._text_emb

    def __call__(self, s: int, t: int, x0: np.ndarray) -> np.ndarray:
        if s != self.current_scale:
            self.current_scale = s
            self.x0_prev = None
        if not self._guided(s, t):
            return x0
        roi = None
        if self.cfg.mode == "roi-text":
            roi = _scale_roi(self.cfg.roi, self.dims[-1], self.dims[s])
        loss, grad = clip_loss_and_grad(
            self.embedder,
            x0,
            self.cfg.prompt,
            self.cfg,
            self.aug_rng,
            roi=roi,
            text_embeddings=self._texts(),
        )
        saliency = np.sqrt(np.sum(grad**2, axis=2))
        mask = self._mask_for(s, saliency)
        prev = self.x0_prev if self.x0_prev is not None else x0
        out = clip_update(
            x0,
            prev,
            grad,
            mask,
            self.cfg.eta,
            self.cfg.lambda_momentum,
            descent_variant=self.cfg.descent_variant,
        )
        self.x0_prev = out
        self._note("guide", s, t=t, loss=loss)
        return out


class _RoiGuide:
    """Hook blending a target image into its masked region, coarse scales only."""

    def __init__(self, cfg, dims, trace):
        self.cfg = cfg
        self.dims = dims
        self.trace = trace
        target = check_image(cfg.target_image, "target_image")
        mask = check_mask(cfg.target_mask, "target_mask", dims=dims[-1])
        if target.shape[:2] != tuple(dims[-1]):
            raise ValueError(
                f"target_image dims {target.shape[:2]} must match the output dims {dims[-1]}"
            )
        self.targets = [resize(target, d) for d in dims]
        self.masks = [
            (nearest_resize(mask, d) >= 0.5).astype(np.float64) for d in dims
        ]

    def __call__(self, s: int, t: int, x0: np.ndarray) -> np.ndarray:
        if s >= len(self.dims) - 1:
            return x0
        out = roi_update(x0, self.targets[s], self.masks[s], self.cfg.eta)
        if self.trace is not None:
            self.trace.append(
                {"event": "roi", "scale": s, "t": t, "mask_checksum": float(self.masks[s].sum())}
            )
        return out


def guided_sample(
    ckpt: Checkpoint,
    cfg: GuidanceConfig,
    embedder=None,
    rng=None,
    sample_cfg: SampleConfig | None = None,
    trace: list | None = None,
    *,
    model=None,
    start_scale: int = 0,
    x_init: np.ndarray | None = None,
    entry_t: int | None = None,
) -> np.ndarray:
    """Sample with guidance attached.

    Text modes require ``embedder`` and a prompt, and run blur-free with
    stochastic steps at every scale. ``image-roi`` requires a target
    image and mask at output dims. ``start_scale``/``x_init``/``entry_t``
    admit mid-pyramid entry for injection-style tasks.
    """
    rng = check_rng(rng)
    sample_cfg = sample_cfg or SampleConfig()
    _validate_mode(cfg, embedder)
    if model is None:
        model = ckpt.build_model(use_ema=sample_cfg.use_ema)
    dims = run_dims(
        ckpt.rebuild_pyramid().dims, sample_cfg.out_dims, sample_cfg.init_dims_scale
    )
    start_t = _resolve_start_t(ckpt, sample_cfg.t_override)
    if entry_t is not None:
        start_t = start_t.copy()
        start_t[start_scale] = min(max(int(entry_t), 1), ckpt.timesteps)

    if cfg.mode == "roi-text":
        _validate_roi(cfg.roi, dims[-1])
    if cfg.mode in TEXT_MODES:
        gamma_table = np.zeros_like(ckpt.plan.gamma_sample)
        mode = "ddpm-all-scales"
        hook = _TextGuide(ckpt, cfg, embedder, dims, start_t, trace)
    else:
        gamma_table = ckpt.plan.gamma_sample
        mode = sample_cfg.sigma_mode or ckpt.plan.sigma_mode
        hook = _RoiGuide(cfg, dims, trace)

    return reverse_diffusion(
        lambda x, t, s: predict_noise(model, x, t, s),
        ckpt.schedule,
        gamma_table,
        dims,
        sigma_fn=lambda t, s: sigma(ckpt.schedule, t, s, mode),
        rng=rng,
        start_t=start_t,
        start_scale=start_scale,
        x_init=x_init,
        clamp_x0=sample_cfg.clamp_x0,
        x0_hook=hook,
    )


def _validate_mode(cfg: GuidanceConfig, embedder) -> None:
    if cfg.mode in TEXT_MODES:
        if embedder is None:
            raise ValueError(f"mode {cfg.mode!r} requires an embedder")
        if not cfg.prompt:
            raise ValueError(f"mode {cfg.mode!r} requires a non-empty prompt")
        if cfg.mode == "roi-text" and cfg.roi is None:
            raise ValueError("roi-text mode requires a roi rectangle")
    else:
        if cfg.target_image is None or cfg.target_mask is None:
            raise ValueError("image-roi mode requires target_image and target_mask")
