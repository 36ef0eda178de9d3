"""Perceptual distance and Fréchet distance over a fixed feature network.

The extractor is a small convolutional network with frozen, seed-derived
weights. Perceptual distance compares unit-normalized activations at three
tap layers (plus a weighted pixel term), which keeps it differentiable,
zero on identical inputs, and monotone under growing corruption. Fréchet
distance uses the extractor's pooled penultimate features; the resulting
numbers are internally comparable only, never comparable to scores from
other feature networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericalError
from .images import resize_images

PIXEL_TERM_WEIGHT = 0.1
COV_SHRINKAGE = 1e-6
SQRTM_RESIDUAL_TOL = 1e-6


class FeatureExtractor(nn.Module):
    """Frozen random-weight conv net with tapped activations.

    Weights are drawn once from `seed` and never trained; the forward pass is
    deterministic, so feature statistics are reproducible across processes.
    """

    def __init__(self, resolution: int = 32, seed: int = 0, channels: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("extractor needs at least two tap layers")
        self.resolution = int(resolution)
        self.seed = int(seed)
        self.channels = tuple(int(c) for c in channels)
        convs = []
        c_in = 3
        for i, c_out in enumerate(self.channels):
            stride = 1 if i == 0 else 2
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        gen = torch.Generator().manual_seed(self.seed)
        for conv in self.convs:
            fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
        self.requires_grad_(False)
        self.eval()

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Activations after each conv block; input auto-resized if needed."""
        x = resize_images(_as_batch(x), self.resolution)
        x = x.to(self.convs[0].weight.dtype)
        out = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            out.append(x)
        return out

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate pooled features used for Fréchet distance, shape (B, feature_dim)."""
        return self.taps(x)[-1].mean(dim=(2, 3))


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")
    return x


def _unit_normalize(feat: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    norm = torch.sqrt(feat.pow(2).sum(dim=1, keepdim=True) + eps)
    return feat / norm


def perceptual_distance(
    x: torch.Tensor,
    y: torch.Tensor,
    extractor: FeatureExtractor,
    pixel_weight: float = PIXEL_TERM_WEIGHT,
) -> torch.Tensor:
    """Per-pair perceptual distance, differentiable w.r.t. both inputs.

    Returns a scalar tensor for single images or shape (B,) for batches.
    Zero exactly when x == y.
    """
    single = x.dim() == 3 and y.dim() == 3
    xb, yb = _as_batch(x), _as_batch(y)
    if xb.shape != yb.shape:
        raise ValueError(f"image shapes differ: {tuple(xb.shape)} vs {tuple(yb.shape)}")
    dist = pixel_weight * (xb - yb).pow(2).mean(dim=(1, 2, 3))
    for fx, fy in zip(extractor.taps(xb), extractor.taps(yb)):
        diff = _unit_normalize(fx) - _unit_normalize(fy)
        dist = dist + diff.pow(2).mean(dim=(1, 2, 3))
    return dist[0] if single else dist


@dataclass(frozen=True)
class FidStats:
    """Gaussian summary (mean, covariance) of pooled features for one image set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("need at least 2 images for feature statistics")


def feature_stats(
    images: torch.Tensor, extractor: FeatureExtractor, batch_size: int = 64
) -> FidStats:
    if images.dim() != 4 or images.shape[0] < 2:
        raise ValueError("need a batch of at least 2 images")
    feats = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats.append(extractor.pooled(images[start : start + batch_size]).cpu().numpy())
    all_feats = np.concatenate(feats, axis=0).astype(np.float64)
    mean = all_feats.mean(axis=0)
    cov = np.cov(all_feats, rowvar=False)
    return FidStats(mean=mean, cov=cov, count=all_feats.shape[0])


def fid_from_stats(a: FidStats, b: FidStats, shrinkage: float = COV_SHRINKAGE) -> float:
    """Fréchet distance ||mu_a - mu_b||^2 + Tr(C_a + C_b - 2 (C_a C_b)^(1/2))."""
    dim = a.mean.shape[0]
    cov_a = a.cov + shrinkage * np.eye(dim)
    cov_b = b.cov + shrinkage * np.eye(dim)
    prod = cov_a @ cov_b
    sqrt_prod, _ = scipy.linalg.sqrtm(prod, disp=False)
    if np.iscomplexobj(sqrt_prod):
        sqrt_prod = sqrt_prod.real
    residual = np.linalg.norm(sqrt_prod @ sqrt_prod - prod, "fro") / max(
        np.linalg.norm(prod, "fro"), 1e-30
    )
    if not np.isfinite(sqrt_prod).all() or residual > SQRTM_RESIDUAL_TOL:
        raise NumericalError(
            "matrix square root did not converge: "
            f"relative residual {residual:.3e}, cond(C_a C_b)={np.linalg.cond(prod):.3e}"
        )
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(sqrt_prod))
    # PSD clamp: tiny negative values are numerical noise around zero
    return max(value, 0.0)


def fid(
    x: torch.Tensor,
    y: torch.Tensor,
    extractor: FeatureExtractor,
    batch_size: int = 64,
) -> float:
    """Fréchet distance between the feature statistics of two image sets."""
    return fid_from_stats(
        feature_stats(x, extractor, batch_size), feature_stats(y, extractor, batch_size)
    )
