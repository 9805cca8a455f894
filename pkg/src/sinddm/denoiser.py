"""The noise-prediction network.

A fully convolutional residual CNN, deliberately small: no attention, no
up/downsampling inside the net, so its receptive field stays a fixed
35 x 35 window (for the default four blocks of four 3x3 convs plus one
3x3 lift conv; the 1x1 head adds nothing). Timestep and scale enter as
sinusoidal embeddings fused by a tiny MLP and injected into every block
as a per-channel scale-and-shift.

Two padding styles are supported: ``"layer"`` zero-pads every conv (the
default), ``"initial"`` pads once up front and runs valid convs, which
trades a little border fidelity for more diverse layouts near edges.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .validation import check_image

__all__ = [
    "DenoiserSpec",
    "Denoiser",
    "init_params",
    "count_params",
    "receptive_field",
    "embed_time_scale",
    "predict_noise",
]

PADDING_MODES = ("layer", "initial")


@dataclass(frozen=True)
class DenoiserSpec:
    blocks: int = 4
    convs_per_block: int = 4
    hidden_width: int = 88
    embed_dim: int = 64
    padding_mode: str = "layer"

    def __post_init__(self):
        if self.blocks < 1 or self.convs_per_block < 1:
            raise ValueError("blocks and convs_per_block must be positive")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        if self.embed_dim < 4 or self.embed_dim % 2:
            raise ValueError(f"embed_dim must be an even integer >= 4; got {self.embed_dim}")
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"padding_mode must be one of {PADDING_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        return cls(**d)


def receptive_field(spec: DenoiserSpec) -> int:
    """Side length of the square input window one output pixel sees."""
    return 2 * spec.blocks * spec.convs_per_block + 3


def count_params(spec: DenoiserSpec) -> int:
    """Closed-form parameter count (verified against enumeration in tests)."""
    w, e = spec.hidden_width, spec.embed_dim
    lift = 9 * 3 * w + w
    convs = spec.convs_per_block * (9 * w * w + w)
    inject = (2 * e) * (2 * w) + 2 * w
    fuse = 2 * ((2 * e) * (2 * e) + 2 * e)
    head = w * 3 + 3
    return lift + spec.blocks * (convs + inject) + fuse + head


def _sinusoidal(pos: torch.Tensor, dim: int) -> torch.Tensor:
    # pos: (B,) -> (B, dim); standard log-spaced frequency bank.
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=pos.dtype, device=pos.device)
        / (half - 1)
    )
    angles = pos[:, None] * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


class _Block(nn.Module):
    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        w = spec.hidden_width
        pad = 1 if spec.padding_mode == "layer" else 0
        self.convs = nn.ModuleList(
            nn.Conv2d(w, w, 3, padding=pad) for _ in range(spec.convs_per_block)
        )
        self.inject = nn.Linear(2 * spec.embed_dim, 2 * w)
        self.inject_at = min(1, spec.convs_per_block - 1)
        self.crop = 0 if spec.padding_mode == "layer" else spec.convs_per_block

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.inject(F.gelu(emb)).chunk(2, dim=1)
        scale = scale[:, :, None, None]
        shift = shift[:, :, None, None]
        out = h
        for j, conv in enumerate(self.convs):
            out = conv(out)
            if j == self.inject_at:
                out = out * (1.0 + scale) + shift
            if j < len(self.convs) - 1:
                out = F.gelu(out)
        skip = h if not self.crop else h[:, :, self.crop:-self.crop, self.crop:-self.crop]
        return skip + out


class Denoiser(nn.Module):
    """Predicts the noise component of a noisy image at (timestep, scale)."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        w, e = spec.hidden_width, spec.embed_dim
        pad = 1 if spec.padding_mode == "layer" else 0
        self.fuse = nn.Sequential(
            nn.Linear(2 * e, 2 * e), nn.GELU(), nn.Linear(2 * e, 2 * e)
        )
        self.lift = nn.Conv2d(3, w, 3, padding=pad)
        self.blocks = nn.ModuleList(_Block(spec) for _ in range(spec.blocks))
        self.head = nn.Conv2d(w, 3, 1)

    def embed(self, t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        e = self.spec.embed_dim
        parts = torch.cat([_sinusoidal(t, e), _sinusoidal(s, e)], dim=1)
        return self.fuse(parts)

    def forward(self, x: torch.Tensor, t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        dtype = self.head.weight.dtype
        emb = self.embed(t.to(dtype), s.to(dtype))
        if self.spec.padding_mode == "initial":
            p = receptive_field(self.spec) // 2
            x = F.pad(x, (p, p, p, p))
        h = F.gelu(self.lift(x))
        for block in self.blocks:
            h = block(h, emb)
        return self.head(F.gelu(h))


def init_params(spec: DenoiserSpec, seed: int, *, zero_init_final: bool = True) -> Denoiser:
    """Build a Denoiser with fan-in scaled normal weights from a fixed seed.

    The head conv starts at zero by default so an untrained model predicts
    zero noise; disable for gradient or receptive-field probes that need a
    non-degenerate output path.
    """
    model = Denoiser(spec)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("head."):
                if zero_init_final:
                    p.zero_()
                    continue
            if p.ndim > 1:
                fan_in = int(np.prod(p.shape[1:]))
                vals = rng.standard_normal(tuple(p.shape)) / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(vals).to(p.dtype))
            else:
                p.zero_()
    return model


def embed_time_scale(model: Denoiser, t: int, s: int) -> np.ndarray:
    """Joint (timestep, scale) embedding vector as seen by the conv blocks."""
    with torch.no_grad():
        out = model.embed(
            torch.tensor([float(t)]), torch.tensor([float(s)])
        )
    return out[0].double().numpy()


def predict_noise(model: Denoiser, img: np.ndarray, t: int, s: int) -> np.ndarray:
    """Run the network on one H x W x 3 image (any value range) at (t, s).

    Raises if the output contains non-finite values, which during training
    is the usual first symptom of divergence.
    """
    arr = check_image(img, "img", allow_any_range=True)
    dtype = model.head.weight.dtype
    x = torch.from_numpy(arr.transpose(2, 0, 1)[None]).to(dtype)
    with torch.no_grad():
        out = model(x, torch.tensor([float(t)]), torch.tensor([float(s)]))
    if not torch.isfinite(out).all():
        raise FloatingPointError(
            f"denoiser produced non-finite values at t={t}, s={s}"
        )
    return out[0].double().numpy().transpose(1, 2, 0)
