"""Watermarking-key generation by joint optimization.

Trains three small networks against a frozen generator: a parameter mapper
(message -> perturbation of a tiny subset of synthesis weights), a latent
mapper (message -> bounded latent offset), and a message decoder (image ->
bit logits). Each step samples a fresh message, renders the clean and the
mapper-perturbed image from the same latent and noise, and descends on

    perceptual_weight * d(x0, x) + message_loss_weight * BCE(decoder(x), m)

over all trainable parameters. The generator itself is never updated. The
returned decoder (plus metadata) is the secret watermarking key.

A small extra term pushes decoder logits on clean images toward zero so that
extraction from non-watermarked images stays at chance level per image, which
keeps the false-positive rate inside the binomial band at desk scale.
"""

from __future__ import annotations

import copy
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from . import checkpoint as ckpt
from .bits import Message, sample_message
from .errors import IncompatibleCheckpointError, TrainingDivergedError
from .generator import GeneratorArch, StyleGenerator, make_noise
from .images import resize_images
from .percept import FeatureExtractor, perceptual_distance
from .seeds import derive_seed, numpy_rng, torch_rng


def message_to_signs(m: Message) -> torch.Tensor:
    """Encode bits as a float tensor in {-1, +1}."""
    return torch.tensor([2.0 * b - 1.0 for b in m.bits], dtype=torch.float32)


def message_to_targets(m: Message) -> torch.Tensor:
    return torch.tensor(list(m.bits), dtype=torch.float32)


# ---------------------------------------------------------------------------
# Target subset: which generator parameters the mapper may perturb
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetSubset:
    """Named generator parameters (with shapes) a parameter mapper writes to."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]

    @property
    def total(self) -> int:
        return sum(math.prod(s) if s else 1 for s in self.shapes)

    def split_flat(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        out = {}
        idx = 0
        for name, shape in zip(self.names, self.shapes):
            numel = 1
            for s in shape:
                numel *= s
            out[name] = flat[idx : idx + numel].reshape(shape)
            idx += numel
        return out

    def to_dict(self) -> dict:
        return {"names": list(self.names), "shapes": [list(s) for s in self.shapes]}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSubset":
        return cls(
            names=tuple(d["names"]),
            shapes=tuple(tuple(int(x) for x in s) for s in d["shapes"]),
        )


def modulation_bias_subset(generator: StyleGenerator, num_blocks: int = 2) -> TargetSubset:
    """Style-modulation and output biases of the last ``num_blocks`` synthesis blocks."""
    total_blocks = generator.arch.num_blocks
    if not 1 <= num_blocks <= total_blocks:
        raise ValueError(f"num_blocks must lie in [1, {total_blocks}]")
    params = dict(generator.named_parameters())
    names = []
    for i in range(total_blocks - num_blocks, total_blocks):
        names.append(f"synthesis.blocks.{i}.affine.bias")
        names.append(f"synthesis.blocks.{i}.bias")
    shapes = tuple(tuple(params[n].shape) for n in names)
    return TargetSubset(names=tuple(names), shapes=shapes)


def parameter_fraction(subset: TargetSubset, generator: StyleGenerator) -> float:
    total = sum(p.numel() for p in generator.parameters())
    return subset.total / total


# ---------------------------------------------------------------------------
# Mappers and decoder
# ---------------------------------------------------------------------------


class ParameterMapper(nn.Module):
    """MLP from a sign-encoded message to perturbations of the target subset."""

    def __init__(
        self,
        n: int,
        subset: TargetSubset,
        hidden: int = 128,
        gain_init: float = 1e-2,
        zero_init: bool = False,
        condition_on_latent: bool = False,
        latent_dim: int | None = None,
        seed: int | None = None,
    ):
        super().__init__()
        if condition_on_latent and latent_dim is None:
            raise ValueError("latent_dim required when conditioning on the latent code")
        self.n = n
        self.subset = subset
        self.hidden = hidden
        self.condition_on_latent = condition_on_latent
        self.latent_dim = latent_dim
        in_dim = n + (latent_dim if condition_on_latent else 0)
        with fork_seed(seed):
            self.net = nn.Sequential(
                nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, subset.total)
            )
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)
        self.gains = nn.Parameter(torch.full((len(subset.names),), float(gain_init)))

    def forward(self, signs: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        if self.condition_on_latent:
            if z is None:
                raise ValueError("mapper conditions on the latent code; z required")
            signs = torch.cat([signs, z.reshape(-1)[: self.latent_dim]])
        return self.net(signs)

    def offsets(self, m: Message, z: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """Per-parameter perturbation tensors for one message."""
        flat = self.forward(message_to_signs(m), z)
        raw = self.subset.split_flat(flat)
        return {
            name: self.gains[i] * raw[name] for i, name in enumerate(self.subset.names)
        }


class LatentMapper(nn.Module):
    """MLP from a sign-encoded message to a norm-clamped latent offset."""

    def __init__(
        self,
        n: int,
        latent_dim: int,
        hidden: int = 64,
        max_norm: float = 1.0,
        zero_init: bool = False,
        seed: int | None = None,
    ):
        super().__init__()
        self.n = n
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.max_norm = max_norm
        with fork_seed(seed):
            self.net = nn.Sequential(
                nn.Linear(n, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, latent_dim)
            )
            nn.init.normal_(self.net[-1].weight, std=1e-2)
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, signs: torch.Tensor) -> torch.Tensor:
        out = self.net(signs)
        norm = out.norm(dim=-1, keepdim=True)
        scale = torch.clamp(self.max_norm / (norm + 1e-12), max=1.0)
        return out * scale


def apply_latent_mapper(mapper: LatentMapper, m: Message, z: torch.Tensor) -> torch.Tensor:
    """Perturbed latent z + offset(m); broadcast over a batch of latents."""
    if z.shape[-1] != mapper.latent_dim:
        raise ValueError(
            f"latent dimension mismatch: mapper emits {mapper.latent_dim}, z has {z.shape[-1]}"
        )
    offset = mapper(message_to_signs(m))
    return z + offset


class PerturbedGenerator:
    """Read-only view of a generator with parameter offsets applied on the fly.

    The base generator's tensors are never touched; rendering goes through
    ``torch.func.functional_call`` so gradients flow into the offsets.
    """

    def __init__(self, base: StyleGenerator, offsets: dict[str, torch.Tensor]):
        params = dict(base.named_parameters())
        for name, off in offsets.items():
            if name not in params:
                raise RuntimeError(f"mapper targets unknown parameter {name!r}")
            if tuple(off.shape) != tuple(params[name].shape):
                raise RuntimeError(
                    f"mapper perturbation for {name!r} has shape {tuple(off.shape)}, "
                    f"parameter has {tuple(params[name].shape)}"
                )
        self.base = base
        self.offsets = offsets
        self._overrides = {
            name: params[name].detach() + off for name, off in offsets.items()
        }

    @property
    def arch(self) -> GeneratorArch:
        return self.base.arch

    def forward(self, z: torch.Tensor, psi: float = 1.0, noise: list | None = None) -> torch.Tensor:
        return functional_call(
            self.base, self._overrides, args=(z,), kwargs={"psi": psi, "noise": noise}
        )

    __call__ = forward

    @torch.no_grad()
    def generate(
        self, z: torch.Tensor, psi: float = 1.0, rng: torch.Generator | None = None
    ) -> torch.Tensor:
        single = z.dim() == 1
        zb = z.unsqueeze(0) if single else z
        img = self.forward(zb, psi=psi, noise=make_noise(self.base.arch, zb.shape[0], rng))
        return img[0] if single else img


def apply_parameter_mapper(
    mapper: ParameterMapper,
    generator: StyleGenerator,
    m: Message,
    z: torch.Tensor | None = None,
) -> PerturbedGenerator:
    if len(m) != mapper.n:
        raise ValueError(f"message length {len(m)} does not match mapper n={mapper.n}")
    return PerturbedGenerator(generator, mapper.offsets(m, z))


class MessageDecoder(nn.Module):
    """Conv classifier mapping an image (any resolution) to n bit logits."""

    def __init__(
        self,
        n: int,
        decode_resolution: int = 32,
        channels: tuple[int, ...] = (32, 64, 96, 96),
        seed: int | None = None,
    ):
        super().__init__()
        self.n = n
        self.decode_resolution = decode_resolution
        self.channels = tuple(channels)
        ctx = torch.random.fork_rng(devices=[]) if seed is not None else None
        if ctx is not None:
            ctx.__enter__()
            torch.manual_seed(seed + 2)
        convs = []
        c_in = 3
        for c_out in self.channels:
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(c_in, n)
        if ctx is not None:
            ctx.__exit__(None, None, None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1] != 3:
            raise ValueError(f"decoder expects 3-channel images, got {x.shape[1]}")
        x = resize_images(x, self.decode_resolution)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.mean(dim=(2, 3)))


# ---------------------------------------------------------------------------
# The watermarking key
# ---------------------------------------------------------------------------


@dataclass
class WatermarkKey:
    """Secret key: trained decoder plus the metadata needed to use it safely."""

    decoder: MessageDecoder
    n: int
    generator_arch_hash: str
    generator_resolution: int
    kappa: float = 0.05
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.decoder.eval()
        self.decoder.requires_grad_(False)

    @property
    def decode_resolution(self) -> int:
        return self.decoder.decode_resolution

    def check_generator(self, generator: StyleGenerator) -> None:
        """Resolution mismatch is fatal; a differing architecture hash only warns,
        since decoders transfer across similar architectures."""
        if generator.arch.resolution != self.generator_resolution:
            raise ValueError(
                f"key was created for resolution {self.generator_resolution}, "
                f"generator has {generator.arch.resolution}"
            )
        if generator.arch.hash() != self.generator_arch_hash:
            warnings.warn(
                "key was created against a different generator architecture "
                f"({self.generator_arch_hash} != {generator.arch.hash()}); "
                "verification quality may degrade",
                stacklevel=2,
            )


def save_key(key: WatermarkKey, path: str | Path) -> None:
    header = {
        "n": key.n,
        "decode_resolution": key.decode_resolution,
        "decoder_channels": list(key.decoder.channels),
        "generator_arch_hash": key.generator_arch_hash,
        "generator_resolution": key.generator_resolution,
        "kappa": key.kappa,
        "arch_hash": key.generator_arch_hash,
        "meta": key.meta,
    }
    ckpt.write_container(path, ckpt.KIND_KEY, header, dict(key.decoder.state_dict()))


def load_key(path: str | Path) -> WatermarkKey:
    head, tensors = ckpt.read_container(path, expected_kind=ckpt.KIND_KEY)
    decoder = MessageDecoder(
        n=int(head["n"]),
        decode_resolution=int(head["decode_resolution"]),
        channels=tuple(head["decoder_channels"]),
    )
    try:
        decoder.load_state_dict(tensors)
    except RuntimeError as exc:
        raise IncompatibleCheckpointError(f"{path}: decoder tensors do not match header") from exc
    return WatermarkKey(
        decoder=decoder,
        n=int(head["n"]),
        generator_arch_hash=head["generator_arch_hash"],
        generator_resolution=int(head["generator_resolution"]),
        kappa=float(head["kappa"]),
        meta=head.get("meta", {}),
    )


def save_mappers(
    param_mapper: ParameterMapper, latent_mapper: LatentMapper, path: str | Path
) -> None:
    header = {
        "n": param_mapper.n,
        "subset": param_mapper.subset.to_dict(),
        "hidden": param_mapper.hidden,
        "condition_on_latent": param_mapper.condition_on_latent,
        "latent_dim": latent_mapper.latent_dim,
        "latent_hidden": latent_mapper.hidden,
        "max_norm": latent_mapper.max_norm,
        "arch_hash": "",
    }
    tensors = {f"param_mapper.{k}": v for k, v in param_mapper.state_dict().items()}
    tensors.update({f"latent_mapper.{k}": v for k, v in latent_mapper.state_dict().items()})
    ckpt.write_container(path, ckpt.KIND_MAPPERS, header, tensors)


def load_mappers(path: str | Path) -> tuple[ParameterMapper, LatentMapper]:
    head, tensors = ckpt.read_container(path, expected_kind=ckpt.KIND_MAPPERS)
    pm = ParameterMapper(
        n=int(head["n"]),
        subset=TargetSubset.from_dict(head["subset"]),
        hidden=int(head["hidden"]),
        condition_on_latent=bool(head["condition_on_latent"]),
        latent_dim=int(head["latent_dim"]),
    )
    lm = LatentMapper(
        n=int(head["n"]),
        latent_dim=int(head["latent_dim"]),
        hidden=int(head["latent_hidden"]),
        max_norm=float(head["max_norm"]),
    )
    pm.load_state_dict(
        {k[len("param_mapper.") :]: v for k, v in tensors.items() if k.startswith("param_mapper.")}
    )
    lm.load_state_dict(
        {k[len("latent_mapper.") :]: v for k, v in tensors.items() if k.startswith("latent_mapper.")}
    )
    return pm, lm


# ---------------------------------------------------------------------------
# Key generation loop
# ---------------------------------------------------------------------------


@dataclass
class KeygenConfig:
    n: int = 16
    steps: int = 1200
    batch_size: int = 12
    perceptual_weight: float = 1.0
    message_loss_weight: float = 0.1
    clean_neutrality_weight: float = 0.1
    mapper_lr: float = 1e-3
    decoder_lr: float = 1e-3
    latent_clamp: float = 1.0
    condition_on_latent: bool = False
    target_blocks: int = 2
    mapper_hidden: int = 128
    decoder_channels: tuple[int, ...] = (32, 64, 96, 96)
    target_agreement: float = 0.95
    eval_every: int = 100
    holdout_batches: int = 8
    kappa: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("message length must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size positive")
        for name in ("perceptual_weight", "message_loss_weight", "mapper_lr", "decoder_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class KeygenLog:
    records: list = field(default_factory=list)
    final_agreement: float = 0.0
    target_met: bool = False
    warning: str | None = None

    def add(self, **kw) -> None:
        self.records.append(kw)


def _holdout_agreement(
    generator: StyleGenerator,
    param_mapper: ParameterMapper,
    latent_mapper: LatentMapper,
    decoder: MessageDecoder,
    config: KeygenConfig,
    rng_seed: int,
    batches: int,
) -> float:
    """Mean bit agreement of the decoder on freshly mapper-perturbed images."""
    lat_rng = torch_rng(rng_seed)
    noise_rng = torch_rng(rng_seed + 1)
    msg_rng = numpy_rng(rng_seed + 2)
    hits = 0
    total = 0
    with torch.no_grad():
        for _ in range(batches):
            m = sample_message(config.n, msg_rng)
            z = torch.randn(config.batch_size, generator.arch.latent_dim, generator=lat_rng)
            z_wm = apply_latent_mapper(latent_mapper, m, z)
            view = apply_parameter_mapper(param_mapper, generator, m)
            x = view.forward(z_wm, noise=make_noise(generator.arch, z.shape[0], noise_rng))
            bits = (decoder(x) > 0).to(torch.uint8)
            target = torch.tensor(m.bits, dtype=torch.uint8).unsqueeze(0)
            hits += int((bits == target).sum())
            total += bits.numel()
    return hits / max(total, 1)


def keygen(
    generator: StyleGenerator,
    config: KeygenConfig,
    extractor: FeatureExtractor,
) -> tuple[WatermarkKey, ParameterMapper, LatentMapper, KeygenLog]:
    """Train mappers and decoder against a frozen generator; returns the key.

    The generator's tensors are bit-identical before and after. If the
    held-out agreement target is not reached within the step budget the run
    completes with a warning recorded in the log.
    """
    arch = generator.arch
    grad_flags = [p.requires_grad for p in generator.parameters()]
    generator.requires_grad_(False)

    seed = config.seed
    subset = modulation_bias_subset(generator, config.target_blocks)
    param_mapper = ParameterMapper(
        config.n,
        subset,
        hidden=config.mapper_hidden,
        condition_on_latent=config.condition_on_latent,
        latent_dim=arch.latent_dim,
        seed=derive_seed(seed, "keygen.param_mapper"),
    )
    latent_mapper = LatentMapper(
        config.n,
        arch.latent_dim,
        max_norm=config.latent_clamp,
        seed=derive_seed(seed, "keygen.latent_mapper"),
    )
    decoder = MessageDecoder(
        config.n,
        decode_resolution=arch.resolution,
        channels=config.decoder_channels,
        seed=derive_seed(seed, "keygen.decoder"),
    )

    opt = torch.optim.Adam(
        [
            {"params": list(param_mapper.parameters()) + list(latent_mapper.parameters()),
             "lr": config.mapper_lr},
            {"params": decoder.parameters(), "lr": config.decoder_lr},
        ],
        betas=(0.5, 0.999),
    )

    lat_rng = torch_rng(derive_seed(seed, "keygen.latents"))
    noise_rng = torch_rng(derive_seed(seed, "keygen.noise"))
    msg_rng = numpy_rng(derive_seed(seed, "keygen.messages"))
    holdout_seed = derive_seed(seed, "keygen.holdout")
    log = KeygenLog()
    t0 = time.time()

    for step in range(config.steps):
        m = sample_message(config.n, msg_rng)
        z = torch.randn(config.batch_size, arch.latent_dim, generator=lat_rng)
        noise = make_noise(arch, config.batch_size, noise_rng)

        with torch.no_grad():
            x0 = generator(z, noise=noise)

        z_wm = apply_latent_mapper(latent_mapper, m, z)
        view = apply_parameter_mapper(param_mapper, generator, m)
        x = view.forward(z_wm, noise=noise)

        targets = message_to_targets(m).unsqueeze(0).expand(x.shape[0], -1)
        percep = perceptual_distance(x0, x, extractor).mean()
        message_loss = F.binary_cross_entropy_with_logits(decoder(x), targets)
        loss = config.perceptual_weight * percep + config.message_loss_weight * message_loss
        if config.clean_neutrality_weight > 0:
            clean_logits = decoder(x0)
            neutrality = F.binary_cross_entropy_with_logits(
                clean_logits, torch.full_like(clean_logits, 0.5)
            )
            loss = loss + config.clean_neutrality_weight * neutrality

        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, float(loss), context="key generation")

        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        if step % config.eval_every == 0 or step == config.steps - 1:
            agreement = _holdout_agreement(
                generator, param_mapper, latent_mapper, decoder, config, holdout_seed, batches=2
            )
            log.add(
                step=step,
                perceptual=float(percep),
                message=float(message_loss),
                holdout_agreement=agreement,
            )

    log.final_agreement = _holdout_agreement(
        generator,
        param_mapper,
        latent_mapper,
        decoder,
        config,
        holdout_seed + 7,
        batches=config.holdout_batches,
    )
    log.target_met = log.final_agreement >= config.target_agreement
    if not log.target_met and config.steps > 0:
        log.warning = (
            f"held-out agreement {log.final_agreement:.3f} below target "
            f"{config.target_agreement:.3f} after {config.steps} steps"
        )

    for p, flag in zip(generator.parameters(), grad_flags):
        p.requires_grad_(flag)

    key_decoder = copy.deepcopy(decoder)
    key = WatermarkKey(
        decoder=key_decoder,
        n=config.n,
        generator_arch_hash=arch.hash(),
        generator_resolution=arch.resolution,
        kappa=config.kappa,
        meta={
            "seed": seed,
            "steps": config.steps,
            "perceptual_weight": config.perceptual_weight,
            "message_loss_weight": config.message_loss_weight,
            "final_agreement": log.final_agreement,
            "wall_seconds": round(time.time() - t0, 3),
        },
    )
    return key, param_mapper, latent_mapper, log
