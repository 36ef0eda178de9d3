"""Image tensor conventions and I/O.

Images are float32 torch tensors shaped (3, H, W) or (B, 3, H, W) with values
in [-1, 1]. All resizing in the package goes through :func:`resize_images`
(bilinear, align_corners=False) because a resize-filter mismatch between
embedding and verification silently destroys watermark bits. Disk storage is
lossless PNG; lossy storage would act as a hidden JPEG attack.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .seeds import numpy_rng

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def resize_images(x: torch.Tensor, size: int) -> torch.Tensor:
    """Resize to (size, size) with the package-wide deterministic filter."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.shape[-1] != size or x.shape[-2] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x.squeeze(0) if single else x


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """[-1, 1] float tensor (C,H,W) or (B,C,H,W) -> HWC uint8 array(s)."""
    arr = x.detach().clamp(-1.0, 1.0).add(1.0).mul(127.5).round().to(torch.uint8)
    arr = arr.cpu().numpy()
    return np.moveaxis(arr, -3, -1)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """HWC uint8 array(s) -> [-1, 1] float tensor (C,H,W) or (B,C,H,W)."""
    x = torch.from_numpy(np.moveaxis(arr, -1, -3).copy()).float()
    return x / 127.5 - 1.0


def save_png(x: torch.Tensor, path: str | Path) -> None:
    if x.dim() != 3:
        raise ValueError("save_png expects a single (C, H, W) image")
    Image.fromarray(to_uint8(x)).save(str(path), format="PNG")


def load_png(path: str | Path) -> torch.Tensor:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def load_image_dir(path: str | Path, resolution: int, limit: int | None = None) -> torch.Tensor:
    """Load every image under a directory, auto-resized to the target resolution."""
    root = Path(path)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in _IMAGE_SUFFIXES)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise ValueError(f"no images found under {root}")
    out = torch.empty(len(files), 3, resolution, resolution)
    for i, f in enumerate(files):
        out[i] = resize_images(load_png(f), resolution)
    return out


def save_corpus(images: torch.Tensor, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(images))))
    paths = []
    for i, img in enumerate(images):
        p = out / f"img_{i:0{width}d}.png"
        save_png(img, p)
        paths.append(p)
    return paths


def synthetic_corpus(count: int, resolution: int, seed: int = 0) -> torch.Tensor:
    """Procedural stand-in corpus: gradient backgrounds with soft colored blobs.

    Carries enough low-order structure (color statistics, blob placement,
    smooth shading) for a tiny GAN to make visible progress within a few
    thousand steps, while staying diverse enough for detection experiments.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = numpy_rng(seed)
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, resolution), np.linspace(0.0, 1.0, resolution), indexing="ij"
    )
    images = np.empty((count, 3, resolution, resolution), dtype=np.float32)
    for i in range(count):
        top = rng.uniform(-0.9, 0.9, size=3)
        bottom = rng.uniform(-0.9, 0.9, size=3)
        img = top[:, None, None] * (1.0 - yy) + bottom[:, None, None] * yy
        for _ in range(rng.integers(1, 3)):
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            radius = rng.uniform(0.08, 0.25)
            color = rng.uniform(-1.0, 1.0, size=3)
            bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2)))
            img = img + (color[:, None, None] - img) * bump[None] * rng.uniform(0.6, 1.0)
        img += rng.normal(0.0, 0.02, size=img.shape)
        images[i] = np.clip(img, -1.0, 1.0)
    return torch.from_numpy(images)
