"""Symbol-level wireless channel: power normalization, AWGN and flat Rayleigh fading.

All randomness comes from an explicit ``torch.Generator``; nothing here touches
the global RNG.  Signals are complex tensors whose last axis is the symbol axis,
so a batch of blocks is simply a 2-D tensor.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch

SnrSpec = Union[float, Sequence[float]]


class ChannelError(ValueError):
    pass


class Family(str, enum.Enum):
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"


class FadingGranularity(str, enum.Enum):
    PER_BLOCK = "per_block"
    PER_SYMBOL = "per_symbol"


class Equalization(str, enum.Enum):
    PERFECT_CSI = "perfect_csi"
    NONE = "none"


@dataclass(frozen=True)
class ChannelConfig:
    family: Family = Family.AWGN
    snr_db: SnrSpec = (5.0, 20.0)
    fading_granularity: FadingGranularity = FadingGranularity.PER_BLOCK
    equalization: Equalization = Equalization.PERFECT_CSI
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "fading_granularity", FadingGranularity(self.fading_granularity))
        object.__setattr__(self, "equalization", Equalization(self.equalization))
        if isinstance(self.snr_db, (int, float)):
            object.__setattr__(self, "snr_db", float(self.snr_db))
        else:
            lo, hi = (float(v) for v in self.snr_db)
            if lo > hi:
                raise ChannelError(f"snr_db range must satisfy lo <= hi, got [{lo}, {hi}]")
            object.__setattr__(self, "snr_db", (lo, hi))
        if not 0 <= int(self.seed) < 2**64:
            raise ChannelError("seed must be a 64-bit unsigned integer")

    @property
    def is_range(self) -> bool:
        return isinstance(self.snr_db, tuple)

    def with_snr(self, snr_db: float) -> "ChannelConfig":
        return ChannelConfig(self.family, float(snr_db), self.fading_granularity, self.equalization, self.seed)


@dataclass
class SymbolBlock:
    """Complex symbols (``..., L``) carrying ``source_dim`` real features."""

    symbols: torch.Tensor
    source_dim: int

    def __post_init__(self):
        if not torch.is_complex(self.symbols):
            raise ChannelError("symbols must be a complex tensor")
        expected = math.ceil(self.source_dim / 2)
        if self.symbols.shape[-1] != expected:
            raise ChannelError(
                f"block length {self.symbols.shape[-1]} does not match ceil({self.source_dim}/2) = {expected}"
            )

    def __len__(self):
        return self.symbols.shape[-1]


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % 2**63)
    return g


def noise_variance(snr_db: float) -> float:
    """Complex noise variance for unit average transmit power."""
    return 10.0 ** (-float(snr_db) / 10.0)


def pack_features(features: torch.Tensor) -> SymbolBlock:
    """Pair consecutive real features into complex symbols, zero-padding an odd tail."""
    n = features.shape[-1]
    if not torch.isfinite(features).all():
        raise ChannelError("features must be finite")
    if n % 2:
        pad = features.new_zeros(features.shape[:-1] + (1,))
        features = torch.cat([features, pad], dim=-1)
    pairs = features.reshape(features.shape[:-1] + (-1, 2))
    return SymbolBlock(torch.complex(pairs[..., 0], pairs[..., 1]), n)


def unpack_features(block: SymbolBlock, source_dim: int) -> torch.Tensor:
    if source_dim != block.source_dim or len(block) != math.ceil(source_dim / 2):
        raise ChannelError(
            f"cannot unpack {len(block)} symbols (source_dim {block.source_dim}) into {source_dim} features"
        )
    s = block.symbols
    flat = torch.stack([s.real, s.imag], dim=-1).reshape(s.shape[:-1] + (-1,))
    return flat[..., :source_dim]


def normalize_power(block: SymbolBlock) -> SymbolBlock:
    """Scale each block so that the mean of |symbol|^2 is one."""
    s = block.symbols
    if s.shape[-1] == 0:
        raise ChannelError("cannot normalize an empty block")
    # divide by the peak magnitude first so tiny blocks do not underflow in |s|^2;
    # the result does not depend on this factor, so it carries no gradient
    peak = torch.maximum(s.real.abs(), s.imag.abs()).amax(dim=-1, keepdim=True).detach()
    if (peak == 0).any():
        raise ChannelError("zero-power block cannot be normalized")
    s = s / peak
    power = (s.real.square() + s.imag.square()).mean(dim=-1, keepdim=True)
    return SymbolBlock(s / power.sqrt(), block.source_dim)


def _complex_gaussian(shape, variance: float, generator, dtype) -> torch.Tensor:
    std = math.sqrt(variance / 2.0)
    parts = torch.randn(tuple(shape) + (2,), generator=generator, dtype=dtype)
    return torch.complex(parts[..., 0] * std, parts[..., 1] * std)


def rayleigh_gains(shape, generator: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    """CN(0, 1) channel gains, so E|H|^2 = 1 and each component has variance 1/2."""
    return _complex_gaussian(shape, 1.0, generator, dtype)


def transmit(block: SymbolBlock, cfg: ChannelConfig, generator: torch.Generator) -> SymbolBlock:
    """Pass a unit-power block through the channel at the scalar SNR held in ``cfg``."""
    if cfg.is_range:
        raise ChannelError("transmit needs a scalar snr_db; resolve the range first")
    s = block.symbols
    if not (torch.isfinite(s.real).all() and torch.isfinite(s.imag).all()):
        raise ChannelError("non-finite channel input")
    real_dtype = s.real.dtype
    noise = _complex_gaussian(s.shape, noise_variance(cfg.snr_db), generator, real_dtype)
    if cfg.family is Family.AWGN:
        return SymbolBlock(s + noise, block.source_dim)

    if cfg.fading_granularity is FadingGranularity.PER_BLOCK:
        h = rayleigh_gains(s.shape[:-1] + (1,), generator, real_dtype)
    else:
        h = rayleigh_gains(s.shape, generator, real_dtype)
    y = h * s + noise
    if cfg.equalization is Equalization.PERFECT_CSI:
        y = y / h
    return SymbolBlock(y, block.source_dim)


def sample_training_snr(snr_range: Sequence[float], generator: torch.Generator) -> float:
    lo, hi = (float(v) for v in snr_range)
    if lo > hi:
        raise ChannelError(f"snr range must satisfy lo <= hi, got [{lo}, {hi}]")
    u = torch.rand((), generator=generator, dtype=torch.float64).item()
    return lo + (hi - lo) * u


def send_features(features: torch.Tensor, cfg: ChannelConfig, generator: torch.Generator) -> torch.Tensor:
    """pack -> normalize -> transmit -> unpack, differentiable w.r.t. ``features``.

    The receiver gets back the power-normalized features; the normalization scale
    is not undone since the transmitter's power is never known on the far side.
    """
    dim = features.shape[-1]
    block = normalize_power(pack_features(features))
    return unpack_features(transmit(block, cfg, generator), dim)
