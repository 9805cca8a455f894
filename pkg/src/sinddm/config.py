"""Declarative run configuration.

One JSON document covers every knob across the pipeline; unknown keys
are rejected loudly (silent typos in config files are how "it trained
with the wrong width" happens). The CLI resolves precedence as
defaults < config file < explicit flags, then snapshots the result,
including a generated seed when none was given, into the run directory.
"""

from __future__ import annotations

import dataclasses
import json
import secrets
from dataclasses import dataclass, field

__all__ = ["ConfigError", "RunConfig", "generate_seed"]


class ConfigError(ValueError):
    """Config document contains unknown keys or malformed values."""


def generate_seed() -> int:
    return secrets.randbits(31)


@dataclass
class PyramidSection:
    scale_factor: float = 1.5
    num_scales: int | None = None
    rf_side: int = 35
    target_area_ratio: float = 0.4


@dataclass
class ScheduleSection:
    timesteps: int = 100
    blur_norm: str = "rmse"
    sigma_mode: str = "ddpm-scale0-only"


@dataclass
class DenoiserSection:
    blocks: int = 4
    convs_per_block: int = 4
    hidden_width: int = 88
    embed_dim: int = 64
    padding_mode: str = "layer"


@dataclass
class TrainSection:
    steps: int = 120_000
    batch_size: int = 32
    lr: float = 1e-3
    lr_halving_steps: list[int] = field(
        default_factory=lambda: [20_000, 40_000, 70_000, 80_000, 90_000, 110_000]
    )
    ema_decay: float = 0.995
    checkpoint_every: int = 10_000
    train_without_blur: bool = False


@dataclass
class SampleSection:
    n: int = 1
    out_width: int | None = None
    out_height: int | None = None
    width_scale: float | None = None
    height_scale: float | None = None
    init_dims_scale: int | None = None
    t_override: list[int] | None = None
    use_ema: bool = True
    dump_scales: bool = False


@dataclass
class GuidanceSection:
    mode: str = "content"
    prompt: str = ""
    f: float = 0.3
    eta: float = 0.3
    lambda_momentum: float = 0.05
    start_scale: int = 1
    free_final_steps: int = 3
    descent_variant: bool = False
    roi: list[int] | None = None
    n_crops: int = 16
    crop_scale: list[float] = field(default_factory=lambda: [0.5, 1.0])
    hflip: bool = True
    templates: list[str] | None = None
    aug_seed: int = 0
    embedder: str = "stub"
    embedder_dim: int = 32
    native_resolution: int = 224


@dataclass
class EvalSection:
    n: int = 50
    extractor: str = "builtin"
    distance: str = "builtin"


@dataclass
class RunConfig:
    seed: int | None = None
    pyramid: PyramidSection = field(default_factory=PyramidSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _build(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {path or '<root>'} must be an object; got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type.endswith("Section")
        ):
            section_cls = _SECTION_TYPES[name]
            kwargs[name] = _build(section_cls, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "pyramid": PyramidSection,
    "schedule": ScheduleSection,
    "denoiser": DenoiserSection,
    "train": TrainSection,
    "sample": SampleSection,
    "guidance": GuidanceSection,
    "eval": EvalSection,
}
