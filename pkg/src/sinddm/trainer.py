"""Training loop: one image in, a denoiser checkpoint out.

Each step draws one scale for the whole batch and an i.i.d. timestep per
element, corrupts the scale's image with the plan's blur mix and Gaussian
noise, and regresses the noise with an L1 loss. Adam keeps its stock
moments; the learning rate halves at fixed milestones; an exponential
moving average of the weights (the set used for sampling) updates every
step from step zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserSpec, init_params, receptive_field
from .pyramid import Pyramid, build_pyramids, choose_num_scales
from .schedule import NoiseSchedule, ScalePlan, build_plan, cosine_alpha_bar
from .validation import check_image, check_rng

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "make_training_example",
    "draw_scale_and_timesteps",
    "train_step",
    "ema_update",
    "train",
]


class TrainingDiverged(RuntimeError):
    """Raised when the loss or the network output stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 120_000
    batch_size: int = 32
    lr: float = 1e-3
    lr_halving_steps: tuple[int, ...] = (20_000, 40_000, 70_000, 80_000, 90_000, 110_000)
    ema_decay: float = 0.995
    seed: int = 0
    checkpoint_every: int = 10_000
    train_without_blur: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        object.__setattr__(self, "lr_halving_steps", tuple(self.lr_halving_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_halving_steps"] = list(self.lr_halving_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_halving_steps" in d:
            d["lr_halving_steps"] = tuple(d["lr_halving_steps"])
        return cls(**d)


def make_training_example(
    pyramid: Pyramid,
    plan: ScalePlan,
    schedule: NoiseSchedule,
    s: int,
    t: int,
    rng,
    noise: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One corrupted image and its noise target at (scale, timestep).

    The clean/blurred mix uses the train-mode gamma table, so beyond the
    scale's start timestep the input degenerates to the fully blurred
    image plus noise. Pass ``noise`` to pin the Gaussian draw.
    """
    if not 0 <= s < pyramid.num_scales:
        raise ValueError(f"scale {s} outside [0, {pyramid.num_scales - 1}]")
    if not 0 <= t <= schedule.timesteps:
        raise ValueError(f"t={t} outside [0, {schedule.timesteps}]")
    clean = pyramid.scales[s]
    if noise is None:
        noise = check_rng(rng).standard_normal(clean.shape)
    g = plan.gamma_train[s, t]
    mixed = g * pyramid.blurry[s] + (1.0 - g) * clean
    ab = schedule.alpha_bar[t]
    noisy = math.sqrt(ab) * mixed + math.sqrt(1.0 - ab) * noise
    return noisy, noise


def draw_scale_and_timesteps(rng, num_scales: int, timesteps: int, batch_size: int):
    """Uniform scale shared by the batch, i.i.d. uniform timesteps in 0..T."""
    rng = check_rng(rng)
    s = int(rng.integers(0, num_scales))
    ts = rng.integers(0, timesteps + 1, size=batch_size)
    return s, ts


def train_step(model, optimizer, noisy, t, s, target) -> float:
    """One L1 regression step. Returns the scalar loss."""
    pred = model(noisy, t, s)
    loss = (pred - target).abs().mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at t range [{int(t.min())}, {int(t.max())}]"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def ema_update(ema: dict[str, torch.Tensor], model: Denoiser, decay: float) -> None:
    """In-place ema <- decay * ema + (1 - decay) * param."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            ema[name].mul_(decay).add_(p, alpha=1.0 - decay)


def _current_lr(base: float, milestones: tuple[int, ...], step: int) -> float:
    return base * 0.5 ** sum(1 for m in milestones if step >= m)


def train(
    image: np.ndarray,
    spec: DenoiserSpec | None = None,
    config: TrainConfig | None = None,
    *,
    scale_factor: float = 1.5,
    num_scales: int | None = None,
    timesteps: int = 100,
    blur_norm: str = "rmse",
    sigma_mode: str = "ddpm-scale0-only",
    run_dir=None,
    resume_from=None,
    force: bool = False,
    log_fn=None,
    history: list | None = None,
):
    """Train a denoiser on one image and return the final Checkpoint.

    ``run_dir`` (optional) receives periodic and final checkpoint files.
    ``resume_from`` restarts from a saved checkpoint after verifying its
    config fingerprint matches the requested one (``force`` overrides).
    ``log_fn`` gets one dict per step; ``history`` collects the same
    records if a list is supplied.
    """
    from .checkpoint import (
        Checkpoint,
        FORMAT_VERSION,
        FingerprintMismatch,
        compute_fingerprint,
        load_checkpoint,
        save_checkpoint,
    )

    spec = spec or DenoiserSpec()
    config = config or TrainConfig()
    img = check_image(image, "image")
    if num_scales is None:
        num_scales = choose_num_scales(
            img.shape[:2], rf_side=receptive_field(spec), scale_factor=scale_factor
        )
    pyramid = build_pyramids(img, scale_factor, num_scales)
    schedule = cosine_alpha_bar(timesteps)
    plan = build_plan(
        pyramid,
        schedule,
        norm=blur_norm,
        sigma_mode=sigma_mode,
        blur_free=config.train_without_blur,
    )
    if not plan.blur_free:
        for s in range(1, num_scales):
            if plan.rmse[s] > 0.0:
                assert np.all(plan.gamma_train[s, plan.start_t[s] + 1 :] == 1.0), (
                    f"train gamma table must saturate past the start timestep of scale {s}"
                )

    fingerprint = compute_fingerprint(
        spec, config, scale_factor, num_scales, timesteps, pyramid.dims, plan,
        image=pyramid.scales[-1],
    )
    model = init_params(spec, seed=config.seed)
    ema = {k: p.detach().clone() for k, p in model.named_parameters()}
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    start_step = 0

    if resume_from is not None:
        prior = load_checkpoint(resume_from)
        if prior.fingerprint != fingerprint and not force:
            raise FingerprintMismatch(
                "checkpoint was trained under a different configuration "
                f"({prior.fingerprint[:12]} != {fingerprint[:12]}); pass force=True "
                "to resume anyway"
            )
        prior.load_into(model, ema, optimizer)
        if prior.rng_state is not None:
            rng.bit_generator.state = prior.rng_state
        start_step = prior.step

    clean = [
        torch.from_numpy(x.transpose(2, 0, 1)[None]).float() for x in pyramid.scales
    ]
    blurred = [
        torch.from_numpy(x.transpose(2, 0, 1)[None]).float() for x in pyramid.blurry
    ]
    alpha_bar = schedule.alpha_bar

    def snapshot(step: int) -> "Checkpoint":
        return Checkpoint(
            format_version=FORMAT_VERSION,
            spec=spec,
            raw_params={k: p.detach().numpy().copy() for k, p in model.named_parameters()},
            ema_params={k: v.numpy().copy() for k, v in ema.items()},
            schedule=schedule,
            plan=plan,
            scale_factor=scale_factor,
            train_image=pyramid.scales[-1].copy(),
            train_config=config,
            step=step,
            rng_state=rng.bit_generator.state,
            fingerprint=fingerprint,
            opt_state=_optimizer_arrays(model, optimizer),
        )

    for step in range(start_step, config.steps):
        lr = _current_lr(config.lr, config.lr_halving_steps, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        s, ts = draw_scale_and_timesteps(rng, num_scales, timesteps, config.batch_size)
        shape = (config.batch_size, 3) + pyramid.dims[s]
        eps = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32))
        g = torch.from_numpy(
            plan.gamma_train[s, ts].astype(np.float32)
        )[:, None, None, None]
        ab = torch.from_numpy(alpha_bar[ts].astype(np.float32))[:, None, None, None]
        mixed = g * blurred[s] + (1.0 - g) * clean[s]
        noisy = torch.sqrt(ab) * mixed + torch.sqrt(1.0 - ab) * eps
        t_tensor = torch.from_numpy(ts.astype(np.float32))
        s_tensor = torch.full((config.batch_size,), float(s))
        loss = train_step(model, optimizer, noisy, t_tensor, s_tensor, eps)
        ema_update(ema, model, config.ema_decay)
        record = {"step": step, "scale": s, "loss": loss, "lr": lr}
        if log_fn is not None:
            log_fn(record)
        if history is not None:
            history.append(record)
        if run_dir is not None and (step + 1) % config.checkpoint_every == 0 and step + 1 < config.steps:
            save_checkpoint(snapshot(step + 1), _periodic_path(run_dir, step + 1))

    final = snapshot(config.steps)
    if run_dir is not None:
        save_checkpoint(final, _final_path(run_dir))
    return final


def _optimizer_arrays(model, optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"{name}.exp_avg"] = state["exp_avg"].numpy().copy()
        out[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().copy()
        out[f"{name}.step"] = np.asarray([float(state["step"])])
    return out


def _periodic_path(run_dir, step: int):
    import os

    return os.path.join(os.fspath(run_dir), f"checkpoint-step{step:07d}.sinddm")


def _final_path(run_dir):
    import os

    return os.path.join(os.fspath(run_dir), "checkpoint.sinddm")
