"""Sample-set metrics.

Three numbers summarize how a trained model behaves: per-pixel intensity
diversity normalized by the training image's own spread, mean pairwise
perceptual distance (through a pluggable distance adapter), and a
single-image Frechet distance between feature distributions gathered
across spatial positions (through a pluggable feature extractor).
Pretrained feature networks are adapters supplied by the caller; the
built-in extractor is a fixed two-filter bank that keeps the metric
deterministic and dependency-free.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import linalg

from .checkpoint import Checkpoint
from .sampler import SampleConfig, sample
from .validation import check_image, check_rng

__all__ = [
    "FeatureExtractorInterface",
    "FilterBankExtractor",
    "MetricReport",
    "mean_abs_distance",
    "pixel_diversity",
    "perceptual_diversity",
    "sifid",
    "eval_report",
]


@runtime_checkable
class FeatureExtractorInterface(Protocol):
    """Maps an image to a set of feature vectors, one per spatial site."""

    def extract(self, img: np.ndarray) -> np.ndarray:
        """(H, W, 3) image -> (n_sites, dim) features."""
        ...


class FilterBankExtractor:
    """Two fixed 3x3 filters over intensity: local mean and local contrast."""

    KERNELS = (
        np.full((3, 3), 1.0 / 9.0),
        np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]]) / 8.0,
    )

    def extract(self, img: np.ndarray) -> np.ndarray:
        arr = check_image(img, "img", allow_any_range=True)
        inten = arr.mean(axis=2)
        h, w = inten.shape
        if h < 3 or w < 3:
            raise ValueError(f"image too small for 3x3 filters: {inten.shape}")
        maps = []
        for k in self.KERNELS:
            out = np.zeros((h - 2, w - 2))
            for i in range(3):
                for j in range(3):
                    out += k[i, j] * inten[i : i + h - 2, j : j + w - 2]
            maps.append(out.ravel())
        return np.stack(maps, axis=1)


def mean_abs_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Stand-in perceptual distance: mean absolute pixel difference."""
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b))))


def _as_stack(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"samples must stack to (n, H, W, 3); got shape {arr.shape!r}")
    if arr.shape[0] < 2:
        raise ValueError("need at least two samples")
    return arr


def pixel_diversity(samples, train_img: np.ndarray) -> float:
    """Mean per-pixel std of sample intensities over the training image's std.

    Intensity is the channel mean. The per-pixel standard deviation is
    taken across samples and averaged over pixels, then normalized by the
    standard deviation of the training image's own intensities.
    """
    stack = _as_stack(samples)
    train = check_image(train_img, "train_img")
    train_std = float(np.std(train.mean(axis=2)))
    if train_std == 0.0:
        raise ValueError("training image has zero intensity variance")
    inten = stack.mean(axis=3)
    return float(np.mean(np.std(inten, axis=0)) / train_std)


def perceptual_diversity(samples, distance_fn=mean_abs_distance) -> float:
    """Mean pairwise distance over unordered sample pairs."""
    stack = _as_stack(samples)
    n = stack.shape[0]
    total = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(distance_fn(stack[i], stack[j]))
            pairs += 1
    return total / pairs


def _gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, d = features.shape
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    cov = np.atleast_2d(cov)
    if n < d:
        warnings.warn(
            f"only {n} feature vectors for {d} dims; applying shrinkage",
            stacklevel=3,
        )
        lam = d / (n + d)
        cov = (1.0 - lam) * cov + lam * (np.trace(cov) / d) * np.eye(d)
    return mu, cov


def sifid(img_a: np.ndarray, img_b: np.ndarray, extractor=None, eps: float = 1e-6) -> float:
    """Frechet distance between the two images' internal feature statistics.

    Each image contributes one Gaussian fitted over its spatial feature
    vectors. Both covariances get an ``eps`` diagonal jitter before the
    matrix square root, which keeps identical inputs at exactly zero and
    the equal-covariance case at the plain mean-distance term.
    """
    extractor = extractor or FilterBankExtractor()
    fa = np.asarray(extractor.extract(img_a), dtype=np.float64)
    fb = np.asarray(extractor.extract(img_b), dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError("extractor must return (n, dim) arrays of equal dim")
    mu_a, cov_a = _gaussian_stats(fa)
    mu_b, cov_b = _gaussian_stats(fb)
    d = fa.shape[1]
    cov_a = cov_a + eps * np.eye(d)
    cov_b = cov_b + eps * np.eye(d)
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))


@dataclass
class MetricReport:
    """JSON-ready metric summary for one checkpoint.

    ``external_scores`` stays empty here; downstream tooling may add
    scores computed with heavyweight perceptual models.
    """

    schema_version: int
    n_samples: int
    seed: int | None
    pixel_diversity: float
    perceptual_diversity: float
    sifid_mean: float
    sifid_std: float
    out_dims: list[int]
    external_scores: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def eval_report(
    ckpt: Checkpoint,
    n: int = 50,
    rng=None,
    *,
    extractor=None,
    distance_fn=mean_abs_distance,
    seed: int | None = None,
) -> MetricReport:
    """Sample ``n`` images from the checkpoint and score them.

    ``seed`` (when given) builds the generator and is recorded in the
    report; otherwise pass an explicit ``rng``.
    """
    if n < 2:
        raise ValueError("need n >= 2 samples for diversity metrics")
    if seed is not None:
        rng = np.random.default_rng(seed)
    rng = check_rng(rng)
    model = ckpt.build_model(use_ema=True)
    cfg = SampleConfig()
    samples = np.stack([sample(ckpt, cfg, rng, model=model) for _ in range(n)])
    train = ckpt.train_image
    scores = [sifid(s, train, extractor) for s in samples]
    return MetricReport(
        schema_version=1,
        n_samples=n,
        seed=seed,
        pixel_diversity=pixel_diversity(samples, train),
        perceptual_diversity=perceptual_diversity(samples, distance_fn),
        sifid_mean=float(np.mean(scores)),
        sifid_std=float(np.std(scores)),
        out_dims=list(train.shape[:2]),
    )
