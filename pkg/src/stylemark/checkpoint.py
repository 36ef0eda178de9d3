"""Checkpoint container: magic + JSON header + named tensors.

Layout:  ``b"GWMCKPT1" | uint32 header length (LE) | header JSON | npz payload``

The header always carries format_version, kind, and the architecture hash;
tensors round-trip bit-exactly (stored as raw float32/float64 arrays). Loads
validate magic, version, kind, and, when the caller pins one, the
architecture hash.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import IncompatibleCheckpointError

MAGIC = b"GWMCKPT1"
FORMAT_VERSION = 1

KIND_GENERATOR = "generator"
KIND_DISCRIMINATOR = "discriminator"
KIND_KEY = "watermark_key"
KIND_EXTRACTOR = "extractor"
KIND_MAPPERS = "mappers"


def write_container(path: str | Path, kind: str, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["kind"] = kind
    head_bytes = json.dumps(head, sort_keys=True).encode()
    buf = io.BytesIO()
    arrays = {name: t.detach().cpu().numpy() for name, t in tensors.items()}
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head_bytes)))
        f.write(head_bytes)
        f.write(buf.getvalue())


def read_container(
    path: str | Path, expected_kind: str | None = None
) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        with open(path, "rb") as f:
            magic = f.read(len(MAGIC))
            if magic != MAGIC:
                raise IncompatibleCheckpointError(f"{path}: bad magic bytes {magic!r}")
            (head_len,) = struct.unpack("<I", f.read(4))
            head = json.loads(f.read(head_len).decode())
            payload = f.read()
    except (OSError, struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IncompatibleCheckpointError(f"{path}: unreadable container ({exc})") from exc

    if head.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: format version {head.get('format_version')} != {FORMAT_VERSION}"
        )
    if expected_kind is not None and head.get("kind") != expected_kind:
        raise IncompatibleCheckpointError(
            f"{path}: kind {head.get('kind')!r}, expected {expected_kind!r}"
        )
    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
            tensors = {name: torch.from_numpy(npz[name].copy()) for name in npz.files}
    except Exception as exc:
        raise IncompatibleCheckpointError(f"{path}: corrupt tensor payload ({exc})") from exc
    return head, tensors


def save_generator(generator: Any, path: str | Path, meta: dict | None = None) -> None:
    from .generator import StyleGenerator  # local import avoids a cycle

    assert isinstance(generator, StyleGenerator)
    header = {
        "arch": generator.arch.to_dict(),
        "arch_hash": generator.arch.hash(),
        "frozen": generator.frozen,
        "meta": meta or {},
    }
    write_container(path, KIND_GENERATOR, header, dict(generator.state_dict()))


def load_generator(path: str | Path, expected_arch_hash: str | None = None) -> Any:
    from .generator import GeneratorArch, StyleGenerator

    head, tensors = read_container(path, expected_kind=KIND_GENERATOR)
    arch = GeneratorArch.from_dict(head["arch"])
    if arch.hash() != head.get("arch_hash"):
        raise IncompatibleCheckpointError(f"{path}: stored arch hash does not match contents")
    if expected_arch_hash is not None and head["arch_hash"] != expected_arch_hash:
        raise IncompatibleCheckpointError(
            f"{path}: architecture hash {head['arch_hash']} != expected {expected_arch_hash}"
        )
    gen = StyleGenerator(arch)
    gen.load_state_dict(tensors)
    if head.get("frozen"):
        gen.freeze()
    return gen


def save_discriminator(disc: Any, path: str | Path) -> None:
    header = {"resolution": disc.resolution, "arch_hash": f"disc-{disc.resolution}"}
    write_container(path, KIND_DISCRIMINATOR, header, dict(disc.state_dict()))


def load_discriminator(path: str | Path) -> Any:
    from .generator import Discriminator

    head, tensors = read_container(path, expected_kind=KIND_DISCRIMINATOR)
    disc = Discriminator(int(head["resolution"]))
    disc.load_state_dict(tensors)
    return disc


def save_extractor(extractor: Any, path: str | Path) -> None:
    header = {
        "resolution": extractor.resolution,
        "seed": extractor.seed,
        "channels": list(extractor.channels),
        "arch_hash": f"ext-{extractor.seed}-{'x'.join(map(str, extractor.channels))}",
    }
    write_container(path, KIND_EXTRACTOR, header, dict(extractor.state_dict()))


def load_extractor(path: str | Path) -> Any:
    from .percept import FeatureExtractor

    head, tensors = read_container(path, expected_kind=KIND_EXTRACTOR)
    ext = FeatureExtractor(
        resolution=int(head["resolution"]),
        seed=int(head["seed"]),
        channels=tuple(head["channels"]),
    )
    ext.load_state_dict(tensors)
    return ext
