"""Command-line entry points.

Every subcommand resolves a run directory (flag, else $SINDDM_RUNS_DIR,
else ./runs), snapshots the fully resolved config there as config.json,
and writes its artifacts next to it. Exit codes: 0 on success, 1 on a
runtime failure (with a diagnostic on stderr), 2 on bad usage.
"""

from __future__ import annotations

import argparse
import importlib
import json
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, GuidanceSection, RunConfig, generate_seed
from .denoiser import DenoiserSpec
from .embedders import ConstantEmbedder, LinearStubEmbedder
from .evaluation import FilterBankExtractor, eval_report, mean_abs_distance
from .guidance import GuidanceConfig, guided_sample
from .imgio import load_png, save_png
from .manipulations import InjectionSpec, harmonize, style_transfer
from .pyramid import round_half_up
from .sampler import SampleConfig, sample
from .trainer import TrainConfig, train

__all__ = ["main", "run_cli"]


def _resolve_run_dir(out: str | None, name: str) -> str:
    if out is None:
        root = os.environ.get("SINDDM_RUNS_DIR", "runs")
        out = os.path.join(root, f"{name}-{time.strftime('%Y%m%d-%H%M%S')}-{os.getpid()}")
    os.makedirs(out, exist_ok=True)
    return out


def _base_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if cfg.seed is None:
        cfg.seed = generate_seed()
    return cfg


def _override(section, args, mapping: dict[str, str]) -> None:
    for flag, fieldname in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(section, fieldname, value)


def _snapshot(cfg: RunConfig, run_dir: str) -> None:
    cfg.write_json(os.path.join(run_dir, "config.json"))


def _load_image(path: str) -> np.ndarray:
    return load_png(path)


def _make_embedder(gs: GuidanceSection):
    if gs.embedder == "stub":
        return LinearStubEmbedder(dim=gs.embedder_dim, native_resolution=gs.native_resolution)
    if gs.embedder == "zero":
        return ConstantEmbedder(dim=gs.embedder_dim, native_resolution=gs.native_resolution)
    if ":" in gs.embedder:
        mod, attr = gs.embedder.split(":", 1)
        return getattr(importlib.import_module(mod), attr)()
    raise ConfigError(
        f"embedder must be 'stub', 'zero', or 'module:factory'; got {gs.embedder!r}"
    )


def _load_adapter(spec: str, builtin):
    if spec == "builtin":
        return builtin
    if ":" in spec:
        mod, attr = spec.split(":", 1)
        obj = getattr(importlib.import_module(mod), attr)
        return obj() if isinstance(obj, type) else obj
    raise ConfigError(f"adapter must be 'builtin' or 'module:attr'; got {spec!r}")


def _out_dims(cfg: RunConfig, ckpt) -> tuple[int, int] | None:
    sc = cfg.sample
    th, tw = ckpt.rebuild_pyramid().dims[-1]
    if sc.out_height is not None or sc.out_width is not None:
        return (sc.out_height or th, sc.out_width or tw)
    if sc.height_scale is not None or sc.width_scale is not None:
        return (
            max(1, round_half_up(th * (sc.height_scale or 1.0))),
            max(1, round_half_up(tw * (sc.width_scale or 1.0))),
        )
    return None


def _sample_config(cfg: RunConfig, ckpt) -> SampleConfig:
    sc = cfg.sample
    t_override = None
    if sc.t_override is not None:
        t_override = tuple(None if t < 0 else t for t in sc.t_override)
    return SampleConfig(
        out_dims=_out_dims(cfg, ckpt),
        init_dims_scale=sc.init_dims_scale,
        t_override=t_override,
        use_ema=sc.use_ema,
    )


def _guidance_config(cfg: RunConfig, **extra) -> GuidanceConfig:
    g = cfg.guidance
    return GuidanceConfig(
        mode=extra.pop("mode", g.mode),
        prompt=g.prompt,
        f=g.f,
        eta=extra.pop("eta", g.eta),
        lambda_momentum=g.lambda_momentum,
        start_scale=g.start_scale,
        free_final_steps=g.free_final_steps,
        descent_variant=g.descent_variant,
        roi=tuple(g.roi) if g.roi is not None else None,
        n_crops=g.n_crops,
        crop_scale=tuple(g.crop_scale),
        hflip=g.hflip,
        templates=tuple(g.templates) if g.templates is not None else None,
        aug_seed=g.aug_seed,
        **extra,
    )


# ---------------------------------------------------------------- commands


def _cmd_train(args) -> int:
    cfg = _base_config(args)
    _override(cfg.pyramid, args, {"scale_factor": "scale_factor", "num_scales": "num_scales"})
    _override(
        cfg.schedule, args, {"timesteps": "timesteps", "blur_norm": "blur_norm", "sigma_mode": "sigma_mode"}
    )
    _override(
        cfg.denoiser,
        args,
        {
            "hidden_width": "hidden_width",
            "blocks": "blocks",
            "convs_per_block": "convs_per_block",
            "embed_dim": "embed_dim",
            "padding_mode": "padding_mode",
        },
    )
    _override(
        cfg.train,
        args,
        {
            "steps": "steps",
            "batch": "batch_size",
            "lr": "lr",
            "ema_decay": "ema_decay",
            "checkpoint_every": "checkpoint_every",
        },
    )
    if args.no_blur:
        cfg.train.train_without_blur = True
    if args.lr_halving_steps is not None:
        cfg.train.lr_halving_steps = [int(v) for v in args.lr_halving_steps.split(",") if v]

    run_dir = _resolve_run_dir(args.out, "train")
    _snapshot(cfg, run_dir)
    image = _load_image(args.image)
    spec = DenoiserSpec(
        blocks=cfg.denoiser.blocks,
        convs_per_block=cfg.denoiser.convs_per_block,
        hidden_width=cfg.denoiser.hidden_width,
        embed_dim=cfg.denoiser.embed_dim,
        padding_mode=cfg.denoiser.padding_mode,
    )
    tc = TrainConfig(
        steps=cfg.train.steps,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr,
        lr_halving_steps=tuple(cfg.train.lr_halving_steps),
        ema_decay=cfg.train.ema_decay,
        seed=cfg.seed,
        checkpoint_every=cfg.train.checkpoint_every,
        train_without_blur=cfg.train.train_without_blur,
    )
    log_path = os.path.join(run_dir, "train_log.jsonl")
    with open(log_path, "w") as log:
        train(
            image,
            spec,
            tc,
            scale_factor=cfg.pyramid.scale_factor,
            num_scales=cfg.pyramid.num_scales,
            timesteps=cfg.schedule.timesteps,
            blur_norm=cfg.schedule.blur_norm,
            sigma_mode=cfg.schedule.sigma_mode,
            run_dir=run_dir,
            resume_from=args.resume,
            force=args.force,
            log_fn=lambda rec: log.write(json.dumps(rec) + "\n"),
        )
    print(os.path.join(run_dir, "checkpoint.sinddm"))
    return 0


def _cmd_sample(args) -> int:
    cfg = _base_config(args)
    _override(
        cfg.sample,
        args,
        {
            "n": "n",
            "out_width": "out_width",
            "out_height": "out_height",
            "width_scale": "width_scale",
            "height_scale": "height_scale",
            "init_scale": "init_dims_scale",
        },
    )
    if args.t_override:
        cfg.sample.t_override = [int(v) for v in args.t_override.split(",")]
    if args.raw_weights:
        cfg.sample.use_ema = False
    if args.dump_scales:
        cfg.sample.dump_scales = True

    run_dir = _resolve_run_dir(args.out, "sample")
    _snapshot(cfg, run_dir)
    ckpt = load_checkpoint(args.ckpt)
    scfg = _sample_config(cfg, ckpt)
    model = ckpt.build_model(use_ema=scfg.use_ema)
    rng = np.random.default_rng(cfg.seed)
    for i in range(cfg.sample.n):
        scale_outputs: dict | None = {} if cfg.sample.dump_scales else None
        img = sample(ckpt, scfg, rng, model=model, scale_outputs=scale_outputs)
        save_png(img, os.path.join(run_dir, f"sample_{i:03d}.png"))
        if scale_outputs:
            for s, x0 in sorted(scale_outputs.items()):
                save_png(x0, os.path.join(run_dir, f"sample_{i:03d}_scale{s}.png"))
    print(run_dir)
    return 0


def _cmd_guide(args) -> int:
    cfg = _base_config(args)
    g = cfg.guidance
    _override(
        g,
        args,
        {
            "mode": "mode",
            "prompt": "prompt",
            "f": "f",
            "eta": "eta",
            "lambda_momentum": "lambda_momentum",
            "start_scale": "start_scale",
            "free_final_steps": "free_final_steps",
            "embedder": "embedder",
            "embedder_dim": "embedder_dim",
            "native_resolution": "native_resolution",
            "aug_seed": "aug_seed",
        },
    )
    if args.descent:
        g.descent_variant = True
    if args.roi:
        g.roi = [int(v) for v in args.roi.split(",")]
        if len(g.roi) != 4:
            raise ConfigError("--roi expects top,left,height,width")
    _override(
        cfg.sample,
        args,
        {
            "out_width": "out_width",
            "out_height": "out_height",
            "width_scale": "width_scale",
            "height_scale": "height_scale",
        },
    )

    run_dir = _resolve_run_dir(args.out, "guide")
    _snapshot(cfg, run_dir)
    ckpt = load_checkpoint(args.ckpt)
    extra = {}
    embedder = None
    if g.mode == "image-roi":
        if not args.target or not args.target_mask:
            raise ConfigError("image-roi mode requires --target and --target-mask")
        extra["target_image"] = _load_image(args.target)
        mask_img = _load_image(args.target_mask)
        extra["target_mask"] = ((mask_img.mean(axis=2) + 1.0) / 2.0 >= 0.5).astype(np.float64)
    else:
        embedder = _make_embedder(g)
    gcfg = _guidance_config(cfg, **extra)
    trace: list = []
    img = guided_sample(
        ckpt,
        gcfg,
        embedder,
        np.random.default_rng(cfg.seed),
        sample_cfg=_sample_config(cfg, ckpt),
        trace=trace,
    )
    save_png(img, os.path.join(run_dir, "guided.png"))
    with open(os.path.join(run_dir, "trace.jsonl"), "w") as f:
        for rec in trace:
            f.write(json.dumps(rec) + "\n")
    print(run_dir)
    return 0


def _cmd_style_transfer(args) -> int:
    cfg = _base_config(args)
    run_dir = _resolve_run_dir(args.out, "style-transfer")
    _snapshot(cfg, run_dir)
    ckpt = load_checkpoint(args.ckpt)
    content = _load_image(args.content)
    spec = InjectionSpec(scale=args.inject_scale, t=args.inject_t, match_histogram=True)
    img = style_transfer(ckpt, content, spec, np.random.default_rng(cfg.seed))
    save_png(img, os.path.join(run_dir, "restyled.png"))
    print(run_dir)
    return 0


def _cmd_harmonize(args) -> int:
    cfg = _base_config(args)
    run_dir = _resolve_run_dir(args.out, "harmonize")
    _snapshot(cfg, run_dir)
    ckpt = load_checkpoint(args.ckpt)
    composite = _load_image(args.composite)
    spec = InjectionSpec(scale=args.inject_scale, t=args.inject_t, match_histogram=False)
    img = harmonize(ckpt, composite, spec, np.random.default_rng(cfg.seed))
    save_png(img, os.path.join(run_dir, "harmonized.png"))
    print(run_dir)
    return 0


def _cmd_outpaint(args) -> int:
    cfg = _base_config(args)
    run_dir = _resolve_run_dir(args.out, "outpaint")
    _snapshot(cfg, run_dir)
    ckpt = load_checkpoint(args.ckpt)
    train_img = ckpt.train_image
    h, w = train_img.shape[:2]
    oh = max(h, round_half_up(h * args.height_scale))
    ow = max(w, round_half_up(w * args.width_scale))
    canvas = np.zeros((oh, ow, 3))
    canvas[:h, :w] = train_img
    mask = np.zeros((oh, ow))
    mask[:h, :w] = 1.0
    gcfg = _guidance_config(
        cfg, mode="image-roi", eta=args.eta, target_image=canvas, target_mask=mask
    )
    cfg.sample.out_height, cfg.sample.out_width = oh, ow
    img = guided_sample(
        ckpt,
        gcfg,
        None,
        np.random.default_rng(cfg.seed),
        sample_cfg=_sample_config(cfg, ckpt),
    )
    save_png(img, os.path.join(run_dir, "outpainted.png"))
    print(run_dir)
    return 0


def _cmd_eval(args) -> int:
    cfg = _base_config(args)
    if args.n is not None:
        cfg.eval.n = args.n
    run_dir = _resolve_run_dir(args.out, "eval")
    _snapshot(cfg, run_dir)
    ckpt = load_checkpoint(args.ckpt)
    extractor = _load_adapter(cfg.eval.extractor, FilterBankExtractor())
    distance = _load_adapter(cfg.eval.distance, mean_abs_distance)
    report = eval_report(
        ckpt, cfg.eval.n, extractor=extractor, distance_fn=distance, seed=cfg.seed
    )
    doc = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    with open(os.path.join(run_dir, "report.json"), "w") as f:
        f.write(doc + "\n")
    print(doc)
    return 0


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    print(json.dumps(ckpt.summary(), indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="run directory (default: $SINDDM_RUNS_DIR/<cmd>-<stamp>)")
    p.add_argument("--config", help="JSON run config (flags override it)")
    p.add_argument("--seed", type=int, help="RNG seed (generated and recorded if omitted)")


def _add_out_dims(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-width", type=int)
    p.add_argument("--out-height", type=int)
    p.add_argument("--width-scale", type=float)
    p.add_argument("--height-scale", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sinddm", description="single-image diffusion: train, sample, steer"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser on one image")
    _add_common(p)
    p.add_argument("--image", required=True, help="8-bit RGB PNG training image")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-halving-steps", help="comma-separated step milestones")
    p.add_argument("--ema-decay", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--scale-factor", type=float)
    p.add_argument("--num-scales", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--convs-per-block", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--padding-mode", choices=("layer", "initial"))
    p.add_argument("--blur-norm", choices=("rmse", "l2"))
    p.add_argument("--sigma-mode", choices=("ddpm-scale0-only", "ddpm-all-scales"))
    p.add_argument("--no-blur", action="store_true", help="ablation: train without the blur mix")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="resume despite a fingerprint mismatch")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int)
    _add_out_dims(p)
    p.add_argument("--init-scale", type=int, help="start the coarsest pass at this scale's dims")
    p.add_argument("--t-override", help="per-scale start timesteps, comma list (-1 keeps default)")
    p.add_argument("--raw-weights", action="store_true", help="sample with raw instead of EMA weights")
    p.add_argument("--dump-scales", action="store_true", help="also save each scale's output")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("guide", help="sample under text or image-region guidance")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("content", "style", "roi-text", "image-roi"))
    p.add_argument("--prompt")
    p.add_argument("--f", type=float, help="fill factor: editable pixel fraction")
    p.add_argument("--eta", type=float, help="guidance strength")
    p.add_argument("--lambda", dest="lambda_momentum", type=float, help="momentum outside the mask")
    p.add_argument("--start-scale", type=int)
    p.add_argument("--free-final-steps", type=int)
    p.add_argument("--descent", action="store_true", help="use the gradient-descent update form")
    p.add_argument("--roi", help="top,left,height,width (roi-text mode)")
    p.add_argument("--target", help="target image PNG (image-roi mode)")
    p.add_argument("--target-mask", help="target mask PNG, white = keep (image-roi mode)")
    p.add_argument("--embedder", help="'stub', 'zero', or module:factory")
    p.add_argument("--embedder-dim", type=int)
    p.add_argument("--native-resolution", type=int)
    p.add_argument("--aug-seed", type=int)
    _add_out_dims(p)
    p.set_defaults(func=_cmd_guide)

    p = sub.add_parser("style-transfer", help="repaint a content image with the trained look")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--content", required=True, help="content PNG")
    p.add_argument("--inject-scale", type=int)
    p.add_argument("--inject-t", type=int)
    p.set_defaults(func=_cmd_style_transfer)

    p = sub.add_parser("harmonize", help="blend a pasted object into the trained scene")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--composite", required=True, help="training image with the paste applied")
    p.add_argument("--inject-scale", type=int)
    p.add_argument("--inject-t", type=int)
    p.set_defaults(func=_cmd_harmonize)

    p = sub.add_parser("outpaint", help="extend the training image beyond its borders")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--width-scale", type=float, default=2.0)
    p.add_argument("--height-scale", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1.0)
    p.set_defaults(func=_cmd_outpaint)

    p = sub.add_parser("eval", help="sample and score a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="print a checkpoint's manifest")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps failures to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
