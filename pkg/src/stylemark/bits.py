"""Message bits and the statistical spine: agreement, exact binomial test, capacity.

Messages are fixed-length binary vectors. Watermark presence is decided by an
exact one-sided binomial test on the number of matching bits k out of n under
the null hypothesis that bits match by chance (p=1/2):

    p_value(n, k) = sum_{i=k..n} C(n, i) / 2^n   (inclusive tail)

The tail is computed with exact integer arithmetic for n <= 64 and in
log-space beyond, so it never underflows for message lengths in practice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .seeds import numpy_rng

# Exact integer tail sums up to this length; log-sum-exp above.
_EXACT_MAX_N = 64


@dataclass(frozen=True)
class Message:
    """An n-bit watermark payload. Bits are 0/1, length is fixed per key."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) == 0:
            raise ValueError("message must contain at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("message bits must be exactly 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def n(self) -> int:
        return len(self.bits)

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "Message":
        return cls(tuple(int(b) for b in bits))

    @classmethod
    def from_hex(cls, s: str, n: int) -> "Message":
        """Decode from hex produced by :meth:`to_hex`; n trims the pad bits."""
        raw = bytes.fromhex(s)
        if len(raw) * 8 < n:
            raise ValueError(f"hex string holds {len(raw) * 8} bits, need {n}")
        unpacked = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
        return cls.from_bits(unpacked[:n])

    def to_hex(self) -> str:
        return np.packbits(np.asarray(self.bits, dtype=np.uint8)).tobytes().hex()

    def complement(self) -> "Message":
        return Message(tuple(1 - b for b in self.bits))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.uint8)


@dataclass(frozen=True)
class ThresholdConfig:
    """Decision threshold for the binomial test; watermark declared when p <= kappa."""

    n: int
    kappa: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must lie strictly in (0, 1), got {self.kappa}")
        if self.n < 1:
            raise ValueError("message length must be positive")


@dataclass(frozen=True)
class VerificationResult:
    """Outcome of verifying one image against a target message."""

    extracted: Message
    matching_bits: int
    p_value: float
    detected: bool

    def to_record(self) -> dict:
        return {
            "k": self.matching_bits,
            "n": self.extracted.n,
            "p_value": self.p_value,
            "detected": self.detected,
            "message_hex": self.extracted.to_hex(),
        }


def sample_message(n: int, seed: int | np.random.Generator = 0) -> Message:
    """Draw n bits independently and uniformly; deterministic under a fixed seed."""
    if n < 1:
        raise ValueError("message length must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else numpy_rng(seed)
    return Message.from_bits(rng.integers(0, 2, size=n))


def bit_agreement(a: Message, b: Message) -> float:
    """Fraction of positions where the two messages agree (1 - bit error rate)."""
    if len(a) != len(b):
        raise ValueError(f"message lengths differ: {len(a)} vs {len(b)}")
    return float(np.mean(a.as_array() == b.as_array()))


def matching_bits(a: Message, b: Message) -> int:
    if len(a) != len(b):
        raise ValueError(f"message lengths differ: {len(a)} vs {len(b)}")
    return int(np.sum(a.as_array() == b.as_array()))


def binomial_p_value(n: int, k: int) -> float:
    """Exact P(X >= k) for X ~ Binomial(n, 1/2), inclusive tail."""
    if n < 1:
        raise ValueError("n must be positive")
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    if k == 0:
        return 1.0
    if n <= _EXACT_MAX_N:
        tail = 0
        for i in range(k, n + 1):
            tail += math.comb(n, i)
        return float(Fraction(tail, 1 << n))
    # log-space accumulation avoids underflow for long messages
    log_half_n = -n * math.log(2.0)
    logs = [
        math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) + log_half_n
        for i in range(k, n + 1)
    ]
    top = max(logs)
    return math.exp(top + math.log(sum(math.exp(v - top) for v in logs)))


def min_detectable_bits(n: int, kappa: float = 0.05) -> int:
    """Smallest k with binomial_p_value(n, k) <= kappa."""
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie strictly in (0, 1)")
    for k in range(n + 1):
        if binomial_p_value(n, k) <= kappa:
            return k
    raise ValueError(f"no attainable threshold: even k=n has p > {kappa}")


def capacity_threshold(n: int, kappa: float = 0.05) -> float:
    """Capacity in bits at which the mean agreement first becomes detectable."""
    k = min_detectable_bits(n, kappa)
    return n * (k / n - 0.5)


def capacity(agreement_rates: Sequence[float], n: int) -> float:
    """Effective payload in bits: n * (mean agreement - 0.5).

    Negative values indicate adversarially anti-correlated extraction.
    """
    rates = np.asarray(agreement_rates, dtype=np.float64)
    if rates.size == 0:
        raise ValueError("agreement_rates must be non-empty")
    if np.any(rates < 0.0) or np.any(rates > 1.0):
        raise ValueError("agreement rates must lie in [0, 1]")
    if n < 1:
        raise ValueError("message length must be positive")
    return float(n * (rates.mean() - 0.5))
