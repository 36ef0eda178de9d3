"""Miniature style-based generator, its adversarial training loop, and latent sampling.

The architecture is deliberately small (a 2-layer mapping MLP plus a stack of
style-modulated 3x3 convolutions growing from a learned 4x4 constant) but keeps
every mechanism the experiments need: an intermediate style space with a
running mean for truncation, per-layer styles for mixing, per-layer additive
noise, and modulation weights that a parameter mapper can perturb.

Outputs pass through tanh, so pixels always lie in [-1, 1].
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Union

import torch
import torch.nn.functional as F
from torch import nn

from .errors import FrozenModelError, TrainingDivergedError
from .seeds import torch_rng

_DEFAULT_CHANNELS = {16: (64, 48, 32), 32: (64, 64, 48, 32), 64: (64, 64, 48, 32, 24)}


@dataclass(frozen=True)
class GeneratorArch:
    """Static architecture description; hashed into checkpoints and keys."""

    resolution: int = 32
    latent_dim: int = 64
    style_dim: int = 64
    channels: tuple[int, ...] = ()

    def __post_init__(self):
        res = self.resolution
        if res < 16 or (res & (res - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 16, got {res}")
        if self.latent_dim < 1 or self.style_dim < 1:
            raise ValueError("latent and style dimensions must be positive")
        if not self.channels:
            chans = _DEFAULT_CHANNELS.get(res)
            if chans is None:
                raise ValueError(f"no default channel plan for resolution {res}")
            object.__setattr__(self, "channels", chans)
        expected = int(math.log2(self.resolution)) - 1
        if len(self.channels) != expected:
            raise ValueError(
                f"need {expected} synthesis blocks for resolution {res}, "
                f"got {len(self.channels)} channel entries"
            )

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    @property
    def num_style_slots(self) -> int:
        # one style per synthesis block plus one for the RGB head
        return self.num_blocks + 1

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "latent_dim": self.latent_dim,
            "style_dim": self.style_dim,
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorArch":
        return cls(
            resolution=int(d["resolution"]),
            latent_dim=int(d["latent_dim"]),
            style_dim=int(d["style_dim"]),
            channels=tuple(int(c) for c in d["channels"]),
        )

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """z -> w MLP; tracks the running mean style used by the truncation trick."""

    def __init__(self, latent_dim: int, style_dim: int, n_layers: int = 2):
        super().__init__()
        self.norm = PixelNorm()
        layers = []
        dim = latent_dim
        for _ in range(n_layers):
            layers.append(nn.Linear(dim, style_dim))
            layers.append(nn.LeakyReLU(0.2))
            dim = style_dim
        self.net = nn.Sequential(*layers)
        self.register_buffer("w_avg", torch.zeros(style_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(self.norm(z))

    @torch.no_grad()
    def update_w_avg(self, w: torch.Tensor, beta: float = 0.995) -> None:
        self.w_avg.lerp_(w.detach().mean(dim=0), 1.0 - beta)


class ModulatedConv2d(nn.Module):
    """Conv whose kernel is scaled per-sample by a style vector over input channels."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, demodulate: bool = True):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.demodulate = demodulate
        self.padding = kernel // 2
        fan_in = in_ch * kernel * kernel
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel) / math.sqrt(fan_in))

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        w = self.weight[None] * style[:, None, :, None, None]
        if self.demodulate:
            w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
        # grouped conv applies a distinct kernel per sample
        x = x.reshape(1, -1, *x.shape[2:])
        w = w.reshape(b * self.out_ch, self.in_ch, self.kernel, self.kernel)
        x = F.conv2d(x, w, padding=self.padding, groups=b)
        return x.reshape(b, self.out_ch, *x.shape[2:])


class SynthesisBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.normal_(self.affine.weight, std=0.1)
        nn.init.ones_(self.affine.bias)
        self.conv = ModulatedConv2d(in_ch, out_ch, kernel=3)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.noise_gain = nn.Parameter(torch.zeros(()))

    def forward(self, x, w, noise=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv(x, self.affine(w))
        if noise is not None:
            x = x + self.noise_gain * noise
        return F.leaky_relu(x + self.bias[None, :, None, None], 0.2)


class ToRGB(nn.Module):
    def __init__(self, in_ch: int, style_dim: int):
        super().__init__()
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.normal_(self.affine.weight, std=0.1)
        nn.init.ones_(self.affine.bias)
        self.conv = ModulatedConv2d(in_ch, 3, kernel=1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w):
        return self.conv(x, self.affine(w)) + self.bias[None, :, None, None]


class SynthesisNetwork(nn.Module):
    def __init__(self, arch: GeneratorArch):
        super().__init__()
        self.arch = arch
        self.const = nn.Parameter(torch.randn(1, arch.channels[0], 4, 4))
        blocks = []
        in_ch = arch.channels[0]
        for i, out_ch in enumerate(arch.channels):
            blocks.append(SynthesisBlock(in_ch, out_ch, arch.style_dim, upsample=i > 0))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = ToRGB(in_ch, arch.style_dim)

    def forward(self, ws: torch.Tensor, noise: list | None = None) -> torch.Tensor:
        x = self.const.expand(ws.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            x = block(x, ws[:, i], None if noise is None else noise[i])
        return torch.tanh(self.to_rgb(x, ws[:, -1]))


class StyleGenerator(nn.Module):
    """Generator wrapper: mapping + synthesis, freeze contract, cloning."""

    def __init__(self, arch: GeneratorArch, seed: int | None = None):
        super().__init__()
        self.arch = arch
        self.frozen = False
        if seed is None:
            self.mapping = MappingNetwork(arch.latent_dim, arch.style_dim)
            self.synthesis = SynthesisNetwork(arch)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self.mapping = MappingNetwork(arch.latent_dim, arch.style_dim)
                self.synthesis = SynthesisNetwork(arch)

    @property
    def resolution(self) -> int:
        return self.arch.resolution

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    def styles_from_z(self, z: torch.Tensor, psi: float = 1.0) -> torch.Tensor:
        """Map latents to broadcast per-layer styles, applying truncation."""
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.arch.latent_dim:
            raise ValueError(
                f"latent dimension mismatch: expected {self.arch.latent_dim}, got {z.shape[-1]}"
            )
        w = self.mapping(z)
        ws = w.unsqueeze(1).expand(-1, self.arch.num_style_slots, -1)
        return truncate_styles(ws, self.mapping.w_avg, psi)

    def synthesize(self, ws: torch.Tensor, noise: list | None = None) -> torch.Tensor:
        return self.synthesis(ws, noise)

    def forward(self, z: torch.Tensor, psi: float = 1.0, noise: list | None = None) -> torch.Tensor:
        return self.synthesize(self.styles_from_z(z, psi), noise)

    def freeze(self) -> "StyleGenerator":
        self.requires_grad_(False)
        self.frozen = True
        return self

    def trainable_parameters(self):
        if self.frozen:
            raise FrozenModelError("model is frozen; clone it to obtain a trainable copy")
        return self.parameters()

    def clone(self, frozen: bool | None = None) -> "StyleGenerator":
        out = copy.deepcopy(self)
        if frozen is not None:
            out.frozen = frozen
            out.requires_grad_(not frozen)
        return out


def clone_pivot(generator: StyleGenerator) -> StyleGenerator:
    """Deep-copied, frozen snapshot; immune to any later tuning of the source."""
    return generator.clone(frozen=True)


def truncate_styles(ws: torch.Tensor, w_avg: torch.Tensor, psi: float) -> torch.Tensor:
    """psi=1 leaves styles unchanged; psi=0 collapses them to the running mean."""
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"truncation psi must lie in [0, 1], got {psi}")
    if psi == 1.0:
        return ws
    return w_avg.reshape(1, 1, -1) + psi * (ws - w_avg.reshape(1, 1, -1))


def make_noise(
    arch: GeneratorArch, batch: int, rng: torch.Generator | None
) -> list[torch.Tensor] | None:
    """Per-block additive noise maps; None means zero noise (deterministic render)."""
    if rng is None:
        return None
    out = []
    size = 4
    for i in range(arch.num_blocks):
        out.append(torch.randn(batch, 1, size, size, generator=rng))
        if i + 1 < arch.num_blocks:
            size *= 2
    return out


@torch.no_grad()
def generate(
    generator: StyleGenerator,
    z: torch.Tensor,
    psi: float = 1.0,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Render image(s) for latent code(s); bit-identical under the same rng seed."""
    single = z.dim() == 1
    zb = z.unsqueeze(0) if single else z
    noise = make_noise(generator.arch, zb.shape[0], rng)
    img = generator(zb, psi=psi, noise=noise)
    return img[0] if single else img


# ---------------------------------------------------------------------------
# Latent sampling strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    """z ~ N(0, I_d)."""


@dataclass(frozen=True)
class Truncated:
    """Gaussian latents rendered with style truncation psi."""

    psi: float

    def __post_init__(self):
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")


@dataclass(frozen=True)
class Interpolation:
    """Evenly spaced points on segments between latent pairs.

    With explicit endpoints the batch is the single segment sampled at
    ``steps`` points (endpoints included). Without endpoints, random pairs
    are drawn and each segment contributes ``steps`` points.
    """

    z1: torch.Tensor | None = None
    z2: torch.Tensor | None = None
    steps: int = 8

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("interpolation needs at least 2 steps")
        if (self.z1 is None) != (self.z2 is None):
            raise ValueError("provide both endpoints or neither")


@dataclass(frozen=True)
class StyleMix:
    """W-space codes using z1's styles below the crossover layer and z2's from it on."""

    crossover_layer: int
    z1: torch.Tensor | None = None
    z2: torch.Tensor | None = None

    def __post_init__(self):
        if self.crossover_layer < 0:
            raise ValueError("crossover layer must be non-negative")
        if (self.z1 is None) != (self.z2 is None):
            raise ValueError("provide both latents or neither")


SamplingStrategy = Union[Gaussian, Truncated, Interpolation, StyleMix]


@dataclass
class LatentBatch:
    """Either raw latents (zs) or explicit per-layer styles (ws), plus truncation."""

    zs: torch.Tensor | None = None
    ws: torch.Tensor | None = None
    psi: float = 1.0

    def __post_init__(self):
        if (self.zs is None) == (self.ws is None):
            raise ValueError("exactly one of zs / ws must be set")

    def __len__(self) -> int:
        return (self.zs if self.zs is not None else self.ws).shape[0]


def sample_latents(
    generator: StyleGenerator,
    count: int,
    strategy: SamplingStrategy = Gaussian(),
    rng: torch.Generator | None = None,
    seed: int = 0,
) -> LatentBatch:
    if count < 1:
        raise ValueError("count must be positive")
    rng = rng if rng is not None else torch_rng(seed)
    d = generator.arch.latent_dim

    if isinstance(strategy, Gaussian):
        return LatentBatch(zs=torch.randn(count, d, generator=rng))

    if isinstance(strategy, Truncated):
        return LatentBatch(zs=torch.randn(count, d, generator=rng), psi=strategy.psi)

    if isinstance(strategy, Interpolation):
        if strategy.z1 is not None:
            if count != strategy.steps:
                raise ValueError("with explicit endpoints, count must equal steps")
            t = torch.linspace(0.0, 1.0, strategy.steps).unsqueeze(1)
            return LatentBatch(zs=strategy.z1[None] + t * (strategy.z2 - strategy.z1)[None])
        pieces = []
        while sum(p.shape[0] for p in pieces) < count:
            z1 = torch.randn(d, generator=rng)
            z2 = torch.randn(d, generator=rng)
            t = torch.linspace(0.0, 1.0, strategy.steps).unsqueeze(1)
            pieces.append(z1[None] + t * (z2 - z1)[None])
        return LatentBatch(zs=torch.cat(pieces)[:count])

    if isinstance(strategy, StyleMix):
        slots = generator.arch.num_style_slots
        if strategy.crossover_layer >= slots:
            raise ValueError(
                f"crossover layer {strategy.crossover_layer} out of range (< {slots})"
            )
        if strategy.z1 is not None:
            z1 = strategy.z1.expand(count, d) if strategy.z1.dim() == 1 else strategy.z1
            z2 = strategy.z2.expand(count, d) if strategy.z2.dim() == 1 else strategy.z2
        else:
            z1 = torch.randn(count, d, generator=rng)
            z2 = torch.randn(count, d, generator=rng)
        with torch.no_grad():
            w1 = generator.mapping(z1)
            w2 = generator.mapping(z2)
        ws = w2.unsqueeze(1).repeat(1, slots, 1)
        ws[:, : strategy.crossover_layer] = w1.unsqueeze(1)
        return LatentBatch(ws=ws)

    raise ValueError(f"unknown sampling strategy: {strategy!r}")


@torch.no_grad()
def render_batch(
    generator: StyleGenerator,
    latents: LatentBatch | torch.Tensor,
    rng: torch.Generator | None = None,
    minibatch: int = 64,
) -> torch.Tensor:
    """Render a latent batch to images without gradients, in minibatches."""
    if isinstance(latents, torch.Tensor):
        latents = LatentBatch(zs=latents)
    out = []
    for start in range(0, len(latents), minibatch):
        stop = start + minibatch
        if latents.zs is not None:
            ws = generator.styles_from_z(latents.zs[start:stop], psi=latents.psi)
        else:
            ws = truncate_styles(
                latents.ws[start:stop], generator.mapping.w_avg, latents.psi
            )
        noise = make_noise(generator.arch, ws.shape[0], rng)
        out.append(generator.synthesize(ws, noise))
    return torch.cat(out)


# ---------------------------------------------------------------------------
# Adversarial training
# ---------------------------------------------------------------------------


class Discriminator(nn.Module):
    """Small conv classifier mapping an image to a single real/fake logit."""

    def __init__(self, resolution: int, base_channels: int = 48, max_channels: int = 96):
        super().__init__()
        num_down = int(math.log2(resolution)) - 2
        convs = []
        c_in = 3
        c_out = base_channels
        for _ in range(num_down):
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            c_in = c_out
            c_out = min(max_channels, c_out * 2)
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(c_in * 16, 1)
        self.resolution = resolution

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.flatten(1)).squeeze(1)


@dataclass
class GANConfig:
    arch: GeneratorArch = field(default_factory=GeneratorArch)
    batch_size: int = 16
    total_steps: int = 2000
    g_lr: float = 2e-3
    d_lr: float = 2e-3
    adam_betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 1.0
    r1_interval: int = 16
    w_avg_beta: float = 0.995
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be positive and total_steps non-negative")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, **kw) -> None:
        self.records.append(kw)

    def last(self) -> dict:
        return self.records[-1] if self.records else {}


def train_gan(
    dataset: torch.Tensor, config: GANConfig
) -> tuple[StyleGenerator, Discriminator, TrainLog]:
    """Alternating non-saturating logistic GAN training on an image corpus.

    The discriminator maximizes log D(real) + log(1 - D(fake)); the generator
    maximizes log D(fake). R1 gradient regularization is applied lazily for
    stability. total_steps=0 returns the seed-initialized networks unchanged.
    """
    if dataset.dim() != 4 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (N, 3, H, W) tensor")
    res = config.arch.resolution
    if dataset.shape[-1] != res or dataset.shape[-2] != res:
        raise ValueError(
            f"dataset resolution {tuple(dataset.shape[-2:])} does not match configured {res}"
        )

    gen = StyleGenerator(config.arch, seed=config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed + 1)
        disc = Discriminator(res)

    g_opt = torch.optim.Adam(gen.parameters(), lr=config.g_lr, betas=config.adam_betas)
    d_opt = torch.optim.Adam(disc.parameters(), lr=config.d_lr, betas=config.adam_betas)

    lat_rng = torch_rng(config.seed + 2)
    noise_rng = torch_rng(config.seed + 3)
    idx_rng = torch_rng(config.seed + 4)
    log = TrainLog()

    for step in range(config.total_steps):
        idx = torch.randint(0, dataset.shape[0], (config.batch_size,), generator=idx_rng)
        real = dataset[idx]

        # discriminator step
        z = torch.randn(config.batch_size, config.arch.latent_dim, generator=lat_rng)
        with torch.no_grad():
            fake = gen(z, noise=make_noise(config.arch, config.batch_size, noise_rng))
        run_r1 = config.r1_gamma > 0 and step % config.r1_interval == 0
        real_in = real.detach().requires_grad_(run_r1)
        real_logit = disc(real_in)
        fake_logit = disc(fake)
        d_loss = F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()
        if run_r1:
            (grad,) = torch.autograd.grad(real_logit.sum(), real_in, create_graph=True)
            d_loss = d_loss + (0.5 * config.r1_gamma * config.r1_interval) * grad.pow(
                2
            ).sum(dim=(1, 2, 3)).mean()
        d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        d_opt.step()

        # generator step
        z = torch.randn(config.batch_size, config.arch.latent_dim, generator=lat_rng)
        w = gen.mapping(z)
        ws = w.unsqueeze(1).expand(-1, config.arch.num_style_slots, -1)
        fake = gen.synthesize(ws, make_noise(config.arch, config.batch_size, noise_rng))
        g_loss = F.softplus(-disc(fake)).mean()
        g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        g_opt.step()
        gen.mapping.update_w_avg(w, config.w_avg_beta)

        if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
            raise TrainingDivergedError(step, float(d_loss + g_loss), context="GAN training")

        if step % config.log_every == 0 or step == config.total_steps - 1:
            log.add(
                step=step,
                d_loss=float(d_loss),
                g_loss=float(g_loss),
                real_logit=float(real_logit.mean()),
                fake_logit=float(fake_logit.mean()),
            )

    return gen, disc, log
