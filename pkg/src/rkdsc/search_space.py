"""Depth-search space: candidate ops, mixed layers and the supernet.

Each mixed layer holds a set of candidate transforms with identical input and
output shapes.  Candidate ``j`` in the default space is a stack of ``j + 1``
bottleneck residual blocks, so the search decides how deep each stage is.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORMALIZATIONS = ("max", "sum", "none")


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# -- candidate operations ---------------------------------------------------------


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand with an inner skip."""

    def __init__(self, channels: int, expansion: int = 4):
        super().__init__()
        mid = max(1, channels // expansion)
        self.reduce = nn.Conv2d(channels, mid, 1)
        self.conv = nn.Conv2d(mid, mid, 3, padding=1)
        self.expand = nn.Conv2d(mid, channels, 1)

    def forward(self, x):
        y = F.relu(self.reduce(x))
        y = F.relu(self.conv(y))
        return F.relu(x + self.expand(y))


class BlockStack(nn.Module):
    def __init__(self, channels: int, depth: int, expansion: int = 4):
        super().__init__()
        self.blocks = nn.Sequential(*[Bottleneck(channels, expansion) for _ in range(depth)])

    def forward(self, x):
        return self.blocks(x)


class NullOp(nn.Module):
    """Always outputs zeros but owns ``num_params`` learnable scalars.

    Lets a search space contain functionally identical candidates that differ
    only in size, which isolates the effect of the complexity penalty.
    """

    def __init__(self, num_params: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(num_params))

    def forward(self, x):
        return x * 0.0 + 0.0 * self.weight.sum()


class LinearOp(nn.Module):
    """Affine map on the last axis; handy for small vector search spaces."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(dim, dim)

    def forward(self, x):
        return torch.tanh(self.fc(x))


@dataclass
class CandidateOp:
    id: str
    builder: Callable[[], nn.Module]
    param_count: Optional[int] = None

    def build(self) -> nn.Module:
        module = self.builder()
        n = count_params(module)
        if self.param_count is None:
            self.param_count = n
        elif self.param_count != n:
            raise ValueError(f"candidate {self.id!r} declares {self.param_count} params but builds {n}")
        return module


# -- penalty factors and mixing ---------------------------------------------------


def penalty_factors(param_counts: Sequence[int], t_beta: float, normalization: str = "max") -> np.ndarray:
    """Softmax of (normalized) parameter counts at temperature ``t_beta``.

    Larger operations receive larger penalties.  Counts are rescaled before the
    softmax because raw counts overflow ``exp`` for any realistic layer.
    """
    counts = np.asarray(param_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("need at least one candidate")
    if (counts < 0).any():
        raise ValueError("parameter counts must be non-negative")
    if not t_beta > 0:
        raise ValueError(f"t_beta must be positive, got {t_beta}")
    if normalization == "max":
        scale = counts.max()
    elif normalization == "sum":
        scale = counts.sum()
    elif normalization == "none":
        scale = 1.0
    else:
        raise ValueError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    z = counts / scale if scale > 0 else counts
    z = z / t_beta
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def mixing_weights(alpha: torch.Tensor, t_alpha: float) -> torch.Tensor:
    return torch.softmax(alpha / t_alpha, dim=-1)


class MixedLayer(nn.Module):
    """x -> x + sum_j softmax(alpha / t_alpha)_j * o_j(x)."""

    def __init__(
        self,
        candidates: Sequence[CandidateOp],
        t_alpha: float = 1.0,
        t_beta: float = 2.0,
        normalization: str = "max",
    ):
        super().__init__()
        if not candidates:
            raise ValueError("a mixed layer needs at least one candidate")
        if t_alpha <= 0 or t_beta <= 0:
            raise ValueError("temperatures must be positive")
        self.candidates = list(candidates)
        self.ops = nn.ModuleList([c.build() for c in self.candidates])
        self.t_alpha = float(t_alpha)
        self.t_beta = float(t_beta)
        self.alpha = nn.Parameter(torch.zeros(len(self.candidates)))
        self.register_buffer(
            "beta",
            torch.from_numpy(penalty_factors(self.param_counts, t_beta, normalization)),
        )

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.candidates]

    @property
    def param_counts(self) -> list[int]:
        return [int(c.param_count) for c in self.candidates]

    def weights(self) -> torch.Tensor:
        return mixing_weights(self.alpha, self.t_alpha)

    def forward(self, x):
        w = self.weights().to(x.dtype)
        y = sum(w[j] * op(x) for j, op in enumerate(self.ops))
        if y.shape != x.shape:
            raise ValueError(f"mixed layer output shape {tuple(y.shape)} != input shape {tuple(x.shape)}")
        return x + y


def mixed_forward(layer: MixedLayer, x: torch.Tensor) -> torch.Tensor:
    return layer(x)


# -- search space description and supernet ----------------------------------------


@dataclass
class SearchSpaceSpec:
    """Conv encoder: stem -> ``num_layers`` depth-searched stages -> pooled head.

    Every stage keeps ``width`` channels and the stem's spatial size, so the
    residual sum in each mixed layer is shape-preserving.
    """

    in_channels: int = 3
    width: int = 16
    num_layers: int = 4
    depths: tuple = (1, 2, 3)
    expansion: int = 4
    feature_dim: int = 32
    t_alpha: float = 1.0
    t_beta: float = 2.0
    normalization: str = "max"
    # overrides the default depth candidates, one list per layer
    custom_candidates: Optional[list] = field(default=None, repr=False)

    def layer_candidates(self) -> list[list[CandidateOp]]:
        if self.custom_candidates is not None:
            return [list(c) for c in self.custom_candidates]
        layers = []
        for _ in range(self.num_layers):
            layers.append(
                [
                    CandidateOp(f"blocks_{k}", _stack_builder(self.width, k, self.expansion))
                    for k in self.depths
                ]
            )
        return layers


def _stack_builder(width, depth, expansion):
    return lambda: BlockStack(width, depth, expansion)


class Stem(nn.Module):
    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class Head(nn.Module):
    """Global average pool followed by a linear projection to the feature dim."""

    def __init__(self, width: int, feature_dim: int):
        super().__init__()
        self.proj = nn.Linear(width, feature_dim)

    def forward(self, x):
        return self.proj(x.mean(dim=(-2, -1)))


class Supernet(nn.Module):
    def __init__(self, stem: nn.Module, layers: Sequence[MixedLayer], head: nn.Module, feature_dim: int):
        super().__init__()
        self.stem = stem
        self.layers = nn.ModuleList(layers)
        self.head = head
        self.feature_dim = feature_dim

    def forward(self, x):
        x = self.stem(x)
        for layer in self.layers:
            x = layer(x)
        return self.head(x)

    def arch_parameters(self) -> list[nn.Parameter]:
        return [layer.alpha for layer in self.layers]

    def weight_parameters(self) -> list[nn.Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def weight_param_count(self) -> int:
        return sum(p.numel() for p in self.weight_parameters())


def build_supernet(spec: SearchSpaceSpec) -> Supernet:
    layers = [
        MixedLayer(cands, spec.t_alpha, spec.t_beta, spec.normalization)
        for cands in spec.layer_candidates()
    ]
    net = Supernet(Stem(spec.in_channels, spec.width), layers, Head(spec.width, spec.feature_dim), spec.feature_dim)
    probe = torch.zeros(1, spec.in_channels, 4, 4)
    try:
        with torch.no_grad():
            out = net(probe)
    except (RuntimeError, ValueError) as exc:
        raise ValueError(f"incompatible layer shapes in search space: {exc}") from exc
    if out.shape[-1] != spec.feature_dim:
        raise ValueError(f"head emits {out.shape[-1]} features, expected feature_dim={spec.feature_dim}")
    return net


class DerivedLayer(nn.Module):
    """Residual layer over the selected candidates (averaged when more than one)."""

    def __init__(self, ops: Sequence[nn.Module]):
        super().__init__()
        self.ops = nn.ModuleList(ops)

    def forward(self, x):
        return x + sum(op(x) for op in self.ops) / len(self.ops)


class StudentEncoder(nn.Module):
    """Fixed encoder instantiated from a derived architecture."""

    def __init__(self, stem, layers, head, feature_dim):
        super().__init__()
        self.stem = stem
        self.layers = nn.ModuleList(layers)
        self.head = head
        self.feature_dim = feature_dim

    def forward(self, x):
        x = self.stem(x)
        for layer in self.layers:
            x = layer(x)
        return self.head(x)


def build_student(spec: SearchSpaceSpec, selection: Sequence[Sequence[str]]) -> StudentEncoder:
    """Fresh-weight encoder with only the selected candidates in each layer."""
    all_cands = spec.layer_candidates()
    if len(selection) != len(all_cands):
        raise ValueError(f"architecture has {len(selection)} layers, search space has {len(all_cands)}")
    layers = []
    for ids, cands in zip(selection, all_cands):
        by_id = {c.id: c for c in cands}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ValueError(f"unknown candidate ids {missing}")
        layers.append(DerivedLayer([by_id[i].build() for i in ids]))
    return StudentEncoder(Stem(spec.in_channels, spec.width), layers, Head(spec.width, spec.feature_dim), spec.feature_dim)
