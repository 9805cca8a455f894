"""Text-image embedder adapters.

Guidance only needs three things from an embedder: a native input
resolution, differentiable image embeddings, and text embeddings. Any
model matching ``EmbedderInterface`` plugs in; the heavy pretrained
encoders themselves are deliberately not bundled. Two deterministic
stubs ship for tests and dry runs: a seeded linear projection (useful
gradients) and a constant embedder (zero gradients everywhere).
"""

from __future__ import annotations

import hashlib
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

__all__ = ["EmbedderInterface", "LinearStubEmbedder", "ConstantEmbedder"]


@runtime_checkable
class EmbedderInterface(Protocol):
    """What guidance requires of a text-image embedder.

    ``embed_image`` must stay differentiable w.r.t. its input batch;
    both methods return L2-normalized rows.
    """

    native_resolution: int

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [-1, 1] -> (B, D) unit vectors."""
        ...

    def embed_text(self, texts: list[str]) -> torch.Tensor:
        """list of strings -> (N, D) unit vectors."""
        ...


def _seeded_unit(seed_bytes: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(seed_bytes).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


class LinearStubEmbedder:
    """Fixed random linear projection of mean-pooled pixels.

    Deterministic in (seed, dim), differentiable, and resolution
    independent: inputs are average-pooled to an 8x8 grid before the
    projection, so gradients exist at any crop size.
    """

    def __init__(self, dim: int = 32, native_resolution: int = 224, seed: int = 0):
        self.dim = dim
        self.native_resolution = native_resolution
        rng = np.random.default_rng(seed)
        weight = rng.standard_normal((dim, 8 * 8 * 3)) / np.sqrt(8 * 8 * 3)
        self._weight = torch.from_numpy(weight).float()

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(images, (8, 8)).flatten(1)
        emb = pooled @ self._weight.to(pooled.dtype).T
        return emb / emb.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def embed_text(self, texts: list[str]) -> torch.Tensor:
        rows = [_seeded_unit(t.encode("utf-8"), self.dim) for t in texts]
        return torch.from_numpy(np.stack(rows)).float()


class ConstantEmbedder:
    """Returns one fixed unit vector for every image: gradients are zero.

    Exists to exercise the guidance plumbing without steering anything;
    a guided run with this embedder must reproduce the unguided one.
    """

    def __init__(self, dim: int = 32, native_resolution: int = 224):
        self.dim = dim
        self.native_resolution = native_resolution
        v = np.zeros(dim)
        v[0] = 1.0
        self._vec = torch.from_numpy(v).float()

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        return self._vec.to(images.dtype).expand(images.shape[0], -1)

    def embed_text(self, texts: list[str]) -> torch.Tensor:
        return self._vec.expand(len(texts), -1).clone()
