"""Complexity-regularized differentiable architecture search.

The outer problem updates the mixing logits ``alpha`` on validation data with
an added penalty ``lambda_J * sum_l <beta_l, alpha_l>``; the inner problem
trains the supernet weights on a distillation + task loss.  After search, each
layer keeps the candidates with the largest ``alpha * (1 - beta)``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .search_space import MixedLayer, SearchSpaceSpec, Supernet, build_supernet

log = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    lambda_J: float = 0.05
    xi: float = 0.0
    k_select: int = 1
    epochs: int = 10
    batch_size: int = 32
    lr_alpha: tuple = (0.025, 1e-4)
    lr_theta: tuple = (0.05, 1e-3)
    wd_alpha: float = 1e-5
    wd_theta: float = 1e-4
    momentum_theta: float = 0.9
    approx_mode: str = "first_order"
    # weight of the feature-distillation term inside the training loss
    kd_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lambda_J < 0:
            raise ValueError("lambda_J must be non-negative")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if self.k_select < 1:
            raise ValueError("k_select must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.approx_mode not in ("first_order", "unrolled"):
            raise ValueError(f"approx_mode must be 'first_order' or 'unrolled', got {self.approx_mode!r}")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ValueError("kd_weight must lie in [0, 1]")
        self.lr_alpha = tuple(float(v) for v in self.lr_alpha)
        self.lr_theta = tuple(float(v) for v in self.lr_theta)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DiscreteArchitecture:
    layers: list
    param_counts: list
    total_param_count: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"selected": list(ids), "param_counts": list(counts)}
                for ids, counts in zip(self.layers, self.param_counts)
            ],
            "total_param_count": int(self.total_param_count),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteArchitecture":
        layers = [list(l["selected"]) for l in d["layers"]]
        counts = [list(l["param_counts"]) for l in d["layers"]]
        return cls(layers, counts, int(d["total_param_count"]), dict(d.get("provenance", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DiscreteArchitecture":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- regularizer -------------------------------------------------------------------


def complexity_regularizer(layers: Sequence[MixedLayer]):
    """Return (sum over layers, per-layer vector) of <beta_l, alpha_l>."""
    per_layer = [torch.dot(l.beta.to(l.alpha.dtype), l.alpha) for l in layers]
    if not per_layer:
        zero = torch.zeros(())
        return zero, torch.zeros(0)
    stacked = torch.stack(per_layer)
    return stacked.sum(), stacked


def regularizer_gradient(layer: MixedLayer) -> torch.Tensor:
    # J is linear in alpha, so the gradient is beta itself.
    return layer.beta.detach().clone()


# -- derivation --------------------------------------------------------------------


def selection_metric(alpha, beta) -> np.ndarray:
    return np.asarray(alpha, dtype=np.float64) * (1.0 - np.asarray(beta, dtype=np.float64))


def top_k(metric: np.ndarray, k: int) -> list[int]:
    # stable sort on -metric keeps lower indices first among ties
    return [int(j) for j in np.argsort(-metric, kind="stable")[:k]]


def derive_architecture(layers, k_select: int = 1, provenance: Optional[dict] = None) -> DiscreteArchitecture:
    """Keep the ``k_select`` candidates per layer with the largest alpha * (1 - beta).

    ``layers`` is a sequence of MixedLayer objects.
    """
    selected, counts = [], []
    for layer in layers:
        n = len(layer.candidates)
        if k_select > n:
            raise ValueError(f"k_select={k_select} exceeds candidate count {n}")
        alpha = layer.alpha.detach().cpu().double().numpy()
        beta = layer.beta.detach().cpu().double().numpy()
        idx = top_k(selection_metric(alpha, beta), k_select)
        selected.append([layer.candidates[j].id for j in idx])
        counts.append([int(layer.candidates[j].param_count) for j in idx])
    total = sum(sum(c) for c in counts)
    return DiscreteArchitecture(selected, counts, total, dict(provenance or {}))


# -- search model and steps --------------------------------------------------------


class SearchModel(nn.Module):
    """Supernet plus a linear task head; optional frozen teacher for distillation."""

    def __init__(self, supernet: Supernet, num_classes: int, teacher: Optional[nn.Module] = None,
                 kd_weight: float = 0.5):
        super().__init__()
        self.supernet = supernet
        self.classifier = nn.Linear(supernet.feature_dim, num_classes)
        # kept out of the module tree so it never shows up in parameters()
        self._teacher = [teacher] if teacher is not None else []
        self.kd_weight = kd_weight

    @property
    def teacher(self):
        return self._teacher[0] if self._teacher else None

    def arch_parameters(self):
        return self.supernet.arch_parameters()

    def weight_parameters(self):
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def forward(self, x):
        return self.classifier(self.supernet(x))

    def train_loss(self, batch) -> torch.Tensor:
        x, y = batch
        h = self.supernet(x)
        task = F.cross_entropy(self.classifier(h), y)
        if self.teacher is None or self.kd_weight == 0:
            return task
        with torch.no_grad():
            h_tea = self.teacher(x)
        kd = (h_tea - h).square().mean()
        return self.kd_weight * kd + (1.0 - self.kd_weight) * task

    def val_loss(self, batch) -> torch.Tensor:
        x, y = batch
        return F.cross_entropy(self(x), y)


def make_optimizers(model: SearchModel, cfg: SearchConfig):
    alpha_opt = torch.optim.SGD(model.arch_parameters(), lr=cfg.lr_alpha[0], momentum=0.0,
                                weight_decay=cfg.wd_alpha)
    theta_opt = torch.optim.SGD(model.weight_parameters(), lr=cfg.lr_theta[0],
                                momentum=cfg.momentum_theta, weight_decay=cfg.wd_theta)
    return alpha_opt, theta_opt


def _check_finite(loss: torch.Tensor, what: str):
    if not torch.isfinite(loss):
        raise SearchError(f"non-finite {what} loss ({loss.item()}); aborting step")


def _named_weights(model: SearchModel):
    arch = {id(p) for p in model.arch_parameters()}
    return {n: p for n, p in model.named_parameters() if id(p) not in arch}


def arch_step(model: SearchModel, val_batch, cfg: SearchConfig, optimizer: torch.optim.Optimizer,
              train_batch=None) -> torch.Tensor:
    """One update of alpha on L_val(theta', alpha) + lambda_J * sum_l J_l.

    theta' = theta - xi * grad_theta L_train in unrolled mode (treated as a
    constant w.r.t. alpha) and theta' = theta in first-order mode.  theta itself
    is never modified.  Returns the validation loss.
    """
    if len(val_batch[0]) == 0:
        raise SearchError("empty validation batch")
    layers = list(model.supernet.layers)
    optimizer.zero_grad(set_to_none=True)

    if cfg.approx_mode == "unrolled":
        if train_batch is None:
            raise SearchError("unrolled mode needs a training batch for the inner step")
        weights = _named_weights(model)
        train = model.train_loss(train_batch)
        _check_finite(train, "inner training")
        grads = torch.autograd.grad(train, list(weights.values()), allow_unused=True)
        shifted = {
            n: (p - cfg.xi * g if g is not None else p).detach()
            for (n, p), g in zip(weights.items(), grads)
        }
        val = functional_call(model, shifted, (val_batch[0],))
        val = F.cross_entropy(val, val_batch[1])
    else:
        val = model.val_loss(val_batch)
    _check_finite(val, "validation")

    reg, _ = complexity_regularizer(layers)
    objective = val + cfg.lambda_J * reg
    arch = model.arch_parameters()
    grads = torch.autograd.grad(objective, arch, allow_unused=True)
    for p, g in zip(arch, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    optimizer.step()
    return val.detach()


def weight_step(model: SearchModel, train_batch, cfg: SearchConfig, optimizer: torch.optim.Optimizer) -> torch.Tensor:
    """One update of the supernet weights on L_train; alpha untouched."""
    if len(train_batch[0]) == 0:
        raise SearchError("empty training batch")
    optimizer.zero_grad(set_to_none=True)
    loss = model.train_loss(train_batch)
    _check_finite(loss, "training")
    weights = model.weight_parameters()
    grads = torch.autograd.grad(loss, weights, allow_unused=True)
    for p, g in zip(weights, grads):
        p.grad = None if g is None else g
    optimizer.step()
    return loss.detach()


# -- full search -------------------------------------------------------------------


@dataclass
class SearchLogRow:
    epoch: int
    val_loss: float
    reg_total: float
    argmax: list
    alpha: list


def iterate_batches(x: torch.Tensor, y: torch.Tensor, batch_size: int, generator: torch.Generator):
    order = torch.randperm(len(x), generator=generator)
    for start in range(0, len(x), batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def _cosine(lr: tuple, epoch: int, total: int) -> float:
    start, end = lr
    if total <= 1:
        return start
    return end + 0.5 * (start - end) * (1 + math.cos(math.pi * epoch / total))


def search(spec: SearchSpaceSpec, data, cfg: SearchConfig, teacher: Optional[nn.Module] = None,
           num_classes: Optional[int] = None, return_model: bool = False):
    """Alternate arch/weight steps for ``cfg.epochs`` epochs, then derive the architecture.

    ``data`` is a ``(train, val)`` pair of ``(inputs, labels)`` tensors.
    Returns ``(architecture, log_rows)`` (plus the SearchModel if requested).
    """
    (x_tr, y_tr), (x_val, y_val) = data
    if len(x_tr) == 0 or len(x_val) == 0:
        raise SearchError("search needs non-empty train and validation splits")
    torch.manual_seed(cfg.seed)
    supernet = build_supernet(spec)
    if num_classes is None:
        num_classes = int(max(y_tr.max(), y_val.max())) + 1
    model = SearchModel(supernet, num_classes, teacher, cfg.kd_weight)
    if teacher is not None:
        model.to(next(teacher.parameters()).dtype)
    alpha_opt, theta_opt = make_optimizers(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)

    log_rows: list[SearchLogRow] = []
    for epoch in range(cfg.epochs):
        for group in alpha_opt.param_groups:
            group["lr"] = _cosine(cfg.lr_alpha, epoch, cfg.epochs)
        for group in theta_opt.param_groups:
            group["lr"] = _cosine(cfg.lr_theta, epoch, cfg.epochs)
        val_iter = iterate_batches(x_val, y_val, cfg.batch_size, gen)
        val_losses = []
        for train_batch in iterate_batches(x_tr, y_tr, cfg.batch_size, gen):
            val_batch = next(val_iter, None)
            if val_batch is None:
                val_iter = iterate_batches(x_val, y_val, cfg.batch_size, gen)
                val_batch = next(val_iter)
            val_losses.append(arch_step(model, val_batch, cfg, alpha_opt, train_batch).item())
            weight_step(model, train_batch, cfg, theta_opt)
        reg, _ = complexity_regularizer(list(supernet.layers))
        row = SearchLogRow(
            epoch=epoch + 1,
            val_loss=float(np.mean(val_losses)),
            reg_total=float(reg.item()),
            argmax=[int(l.alpha.argmax()) for l in supernet.layers],
            alpha=[l.alpha.detach().double().tolist() for l in supernet.layers],
        )
        log_rows.append(row)
        log.info("search epoch %d: L_val=%.4f sumJ=%.4f argmax=%s", row.epoch, row.val_loss, row.reg_total, row.argmax)

    arch = derive_architecture(
        supernet.layers, cfg.k_select, {"seed": cfg.seed, "config_digest": cfg.digest()}
    )
    if return_model:
        return arch, log_rows, model
    return arch, log_rows


def write_search_log(rows: Sequence[SearchLogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "val_loss", "reg_total", "argmax", "alpha"])
        for r in rows:
            w.writerow([
                r.epoch, f"{r.val_loss:.10g}", f"{r.reg_total:.10g}",
                " ".join(map(str, r.argmax)),
                ";".join(" ".join(f"{a:.10g}" for a in layer) for layer in r.alpha),
            ])
