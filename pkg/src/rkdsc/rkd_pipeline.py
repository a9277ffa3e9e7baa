"""Two-stage robust knowledge distillation.

Stage 1 distills the compact semantic encoder from a frozen teacher by feature
MSE.  Stage 2 trains semantic encoder, CAT channel codec and semantic decoder
jointly through the simulated channel, with a per-batch random training SNR.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cat_codec import CatConfig, ChannelDecoder, ChannelEncoder
from .channel import (ChannelConfig, make_generator, normalize_power, pack_features, sample_training_snr,
                      send_features, unpack_features)
from .search_space import BlockStack, Head, Stem

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# -- plans -------------------------------------------------------------------------


@dataclass
class StagePlan:
    epochs: int = 20
    lr: tuple = (5e-3, 5e-4)
    batch_size: int = 32
    weight_decay: float = 0.0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.lr = tuple(float(v) for v in self.lr)


@dataclass
class Stage2Plan(StagePlan):
    epochs: int = 40
    lr: tuple = (2e-3, 1e-4)
    snr_range: tuple = (5.0, 20.0)
    lambda_kd: float = 1 / 3
    lambda_re: float = 1 / 3
    lambda_task: float = 1 / 3

    def __post_init__(self):
        super().__post_init__()
        if min(self.lambda_kd, self.lambda_re, self.lambda_task) < 0:
            raise ValueError("loss weights must be non-negative")
        lo, hi = (float(v) for v in self.snr_range)
        if lo > hi:
            raise ValueError(f"snr_range must satisfy lo <= hi, got [{lo}, {hi}]")
        self.snr_range = (lo, hi)


@dataclass
class TrainPlan:
    stage1: StagePlan = field(default_factory=StagePlan)
    stage2: Stage2Plan = field(default_factory=Stage2Plan)
    seed: int = 0


# -- teacher -----------------------------------------------------------------------


class TeacherModel(nn.Module):
    """Frozen feature extractor; gradients never reach its parameters."""

    def __init__(self, net: nn.Module, feature_dim: int, shift=None, scale=None):
        super().__init__()
        self.net = net
        self.feature_dim = feature_dim
        self.register_buffer("shift", torch.zeros(feature_dim) if shift is None else shift.detach().clone())
        self.register_buffer("scale", torch.ones(feature_dim) if scale is None else scale.detach().clone())
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        with torch.no_grad():
            return (self.net(x) - self.shift) / self.scale


class ConvFeatureNet(nn.Module):
    def __init__(self, in_channels: int, width: int, depth: int, feature_dim: int, expansion: int = 4):
        super().__init__()
        self.stem = Stem(in_channels, width)
        self.body = BlockStack(width, depth, expansion)
        self.head = Head(width, feature_dim)

    def forward(self, x):
        return self.head(self.body(self.stem(x)))


def make_teacher(in_channels: int, feature_dim: int, width: int = 64, depth: int = 3, seed: int = 0,
                 pretrain_data=None, num_classes: Optional[int] = None, pretrain_epochs: int = 5,
                 dtype=torch.float32) -> TeacherModel:
    """Wide conv teacher, random or briefly pretrained on the task labels.

    When ``pretrain_data`` is given its features are also standardized per
    dimension over that data, which keeps the distillation loss on the same
    scale as the task loss.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ConvFeatureNet(in_channels, width, depth, feature_dim).to(dtype)
        if pretrain_data is not None and pretrain_epochs > 0:
            x, y = pretrain_data
            k = num_classes or int(y.max()) + 1
            clf = nn.Linear(feature_dim, k).to(dtype)
            opt = torch.optim.Adam(list(net.parameters()) + list(clf.parameters()), lr=2e-3)
            gen = make_generator(seed)
            for _ in range(pretrain_epochs):
                for xb, yb in _batches(x, y, 32, gen):
                    opt.zero_grad()
                    F.cross_entropy(clf(net(xb)), yb).backward()
                    opt.step()
    if pretrain_data is None:
        return TeacherModel(net, feature_dim)
    with torch.no_grad():
        feats = net(pretrain_data[0])
    std = feats.std(dim=0)
    return TeacherModel(net, feature_dim, feats.mean(dim=0), torch.where(std > 0, std, torch.ones_like(std)))


def teacher_features(teacher: TeacherModel, batch: torch.Tensor) -> torch.Tensor:
    teacher.eval()
    with torch.no_grad():
        return teacher(batch)


# -- losses ------------------------------------------------------------------------


def kd_loss(h_tea: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the per-sample mean squared feature difference."""
    if h_tea.shape != h.shape:
        raise ValueError(f"feature shapes differ: teacher {tuple(h_tea.shape)} vs student {tuple(h.shape)}")
    if h.ndim == 1:
        h_tea, h = h_tea[None], h[None]
    return (h_tea - h).square().mean(dim=-1).mean()


def task_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if y_hat.shape[0] != y.shape[0]:
        raise ValueError(f"{y_hat.shape[0]} predictions for {y.shape[0]} labels")
    return F.cross_entropy(y_hat, y)


def joint_loss(h_tea, h, h_tilde, y_hat, y, lambda_kd: float, lambda_re: float, lambda_task: float):
    """Weighted KD + reconstruction + task loss, averaged over pipelines.

    Each tensor argument may instead be a list with one entry per pipeline.
    Returns ``(total, {"kd": ..., "re": ..., "task": ...})`` with the
    components averaged the same way as the total.
    """
    if min(lambda_kd, lambda_re, lambda_task) < 0:
        raise ValueError("loss weights must be non-negative")
    if not isinstance(h_tea, (list, tuple)):
        h_tea, h, h_tilde, y_hat, y = [h_tea], [h], [h_tilde], [y_hat], [y]
    n = len(h_tea)
    if not all(len(v) == n for v in (h, h_tilde, y_hat, y)):
        raise ValueError("all arguments must cover the same number of pipelines")
    kd = sum(kd_loss(a, b) for a, b in zip(h_tea, h_tilde)) / n
    re = sum(kd_loss(a, b) for a, b in zip(h, h_tilde)) / n
    task = sum(task_loss(a, b) for a, b in zip(y_hat, y)) / n
    total = lambda_kd * kd + lambda_re * re + lambda_task * task
    return total, {"kd": kd, "re": re, "task": task}


# -- systems -----------------------------------------------------------------------


def _through_channel(z: torch.Tensor, snr_db, channel_cfg: Optional[ChannelConfig], generator):
    """pack -> normalize -> (transmit) -> unpack; ``channel_cfg=None`` skips transmit."""
    if channel_cfg is None:
        return unpack_features(normalize_power(pack_features(z)), z.shape[-1])
    return send_features(z, channel_cfg.with_snr(snr_db), generator)


@dataclass
class PipelineState:
    semantic_encoder: nn.Module
    channel_encoder: ChannelEncoder
    channel_decoder: ChannelDecoder
    semantic_decoder: nn.Module
    log: list = field(default_factory=list)

    def modules(self) -> dict:
        return {
            "semantic_encoder": self.semantic_encoder,
            "channel_encoder": self.channel_encoder,
            "channel_decoder": self.channel_decoder,
            "semantic_decoder": self.semantic_decoder,
        }

    def parameters(self):
        for m in self.modules().values():
            yield from m.parameters()

    def forward(self, x, snr_db, channel_cfg: Optional[ChannelConfig], generator=None) -> dict:
        h = self.semantic_encoder(x)
        z = self.channel_encoder(h, snr_db)
        z_tilde = _through_channel(z, snr_db, channel_cfg, generator)
        h_tilde = self.channel_decoder(z_tilde, snr_db)
        return {"h": h, "z": z, "z_tilde": z_tilde, "h_tilde": h_tilde, "logits": self.semantic_decoder(h_tilde)}

    def logits(self, x, snr_db, channel_cfg, generator=None):
        return self.forward(x, snr_db, channel_cfg, generator)["logits"]

    @property
    def transmitted_dim(self) -> int:
        return self.channel_encoder.cfg.compressed_dim


@dataclass
class DirectSystem:
    """Stage-1-only baseline: encoder features go straight onto the channel."""

    semantic_encoder: nn.Module
    semantic_decoder: nn.Module

    def logits(self, x, snr_db, channel_cfg, generator=None):
        h = self.semantic_encoder(x)
        return self.semantic_decoder(_through_channel(h, snr_db, channel_cfg, generator))

    @property
    def transmitted_dim(self) -> int:
        return self.semantic_encoder.feature_dim


def build_pipeline(semantic_encoder: nn.Module, cat: CatConfig, num_classes: int, seed: int = 0,
                   dtype=torch.float32) -> PipelineState:
    feature_dim = semantic_encoder.feature_dim
    if feature_dim != cat.embed_dim:
        raise ValueError(f"encoder feature_dim {feature_dim} != CAT embed_dim {cat.embed_dim}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = ChannelEncoder(cat).to(dtype)
        dec = ChannelDecoder(cat).to(dtype)
        head = nn.Linear(cat.embed_dim, num_classes).to(dtype)
    return PipelineState(semantic_encoder, enc, dec, head)


# -- training loops ----------------------------------------------------------------


def _batches(x, y, batch_size, generator):
    order = torch.randperm(len(x), generator=generator)
    for start in range(0, len(x), batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def _cosine_lr(lr: tuple, epoch: int, total: int) -> float:
    start, end = lr
    if total <= 1:
        return start
    return end + 0.5 * (start - end) * (1 + math.cos(math.pi * epoch / total))


def _set_lr(opt, value):
    for g in opt.param_groups:
        g["lr"] = value


def _finite(loss: torch.Tensor, what: str):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite {what} loss ({loss.item()}); aborting")


def stage1_distill(encoder: nn.Module, teacher: TeacherModel, data, plan: TrainPlan) -> dict:
    """Fit ``encoder`` to the teacher's features; returns per-epoch and per-step losses."""
    x, y = data
    cfg = plan.stage1
    if encoder.feature_dim != teacher.feature_dim:
        raise ValueError(f"encoder feature_dim {encoder.feature_dim} != teacher_dim {teacher.feature_dim}")
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr[0], weight_decay=cfg.weight_decay)
    gen = make_generator(plan.seed)
    epoch_losses, step_losses = [], []
    steps = 0
    for epoch in range(cfg.epochs):
        _set_lr(opt, _cosine_lr(cfg.lr, epoch, cfg.epochs))
        total, count = 0.0, 0
        for xb, _ in _batches(x, y, cfg.batch_size, gen):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            h_tea = teacher_features(teacher, xb)
            loss = kd_loss(h_tea, encoder(xb))
            _finite(loss, "distillation")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            step_losses.append(loss.item())
            total += loss.item() * len(xb)
            count += len(xb)
        if count:
            epoch_losses.append(total / count)
            log.info("stage1 epoch %d: kd=%.5f", epoch + 1, epoch_losses[-1])
    return {"epoch_loss": epoch_losses, "step_loss": step_losses}


def stage2_joint_train(state: PipelineState, teacher: TeacherModel, data, plan: TrainPlan,
                       channel_cfg: ChannelConfig) -> list:
    """Joint training of all four parameter sets through the noisy channel.

    Returns log rows ``(epoch, joint, kd, re, task, snr_mean, snr_min, snr_max)``.
    """
    x, y = data
    cfg = plan.stage2
    params = list(state.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr[0], weight_decay=cfg.weight_decay)
    batch_gen = make_generator(plan.seed)
    snr_gen = make_generator(plan.seed + 1)
    noise_gen = make_generator(channel_cfg.seed)
    rows = []
    for epoch in range(cfg.epochs):
        _set_lr(opt, _cosine_lr(cfg.lr, epoch, cfg.epochs))
        sums = {"joint": 0.0, "kd": 0.0, "re": 0.0, "task": 0.0}
        snrs, n_seen = [], 0
        for xb, yb in _batches(x, y, cfg.batch_size, batch_gen):
            snr = sample_training_snr(cfg.snr_range, snr_gen)
            out = state.forward(xb, snr, channel_cfg, noise_gen)
            h_tea = teacher_features(teacher, xb)
            total, parts = joint_loss(h_tea, out["h"], out["h_tilde"], out["logits"], yb,
                                      cfg.lambda_kd, cfg.lambda_re, cfg.lambda_task)
            _finite(total, "joint")
            opt.zero_grad()
            total.backward()
            opt.step()
            m = len(xb)
            sums["joint"] += total.item() * m
            for k, v in parts.items():
                sums[k] += v.item() * m
            snrs.append(snr)
            n_seen += m
        if n_seen:
            row = {"epoch": epoch + 1, **{k: v / n_seen for k, v in sums.items()},
                   "snr_mean": sum(snrs) / len(snrs), "snr_min": min(snrs), "snr_max": max(snrs)}
            rows.append(row)
            state.log.append(row)
            log.info("stage2 epoch %d: joint=%.5f kd=%.5f re=%.5f task=%.5f", row["epoch"], row["joint"],
                     row["kd"], row["re"], row["task"])
    return rows


def train_task_head(encoder: nn.Module, head: nn.Module, data, plan: StagePlan, seed: int = 0) -> list:
    """Fit a semantic decoder on noiseless, power-normalized frozen-encoder features."""
    x, y = data
    opt = torch.optim.Adam(head.parameters(), lr=plan.lr[0], weight_decay=plan.weight_decay)
    gen = make_generator(seed)
    with torch.no_grad():
        feats = _through_channel(encoder(x), None, None, None)
    losses = []
    for epoch in range(plan.epochs):
        _set_lr(opt, _cosine_lr(plan.lr, epoch, plan.epochs))
        for fb, yb in _batches(feats, y, plan.batch_size, gen):
            loss = task_loss(head(fb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    return losses


# -- checkpoints -------------------------------------------------------------------


def state_digest(modules) -> str:
    """Hash of all parameter/buffer bytes, in name order."""
    h = hashlib.sha256()
    if isinstance(modules, nn.Module):
        modules = {"m": modules}
    for name in sorted(modules):
        sd = modules[name].state_dict()
        for k in sorted(sd):
            h.update(f"{name}.{k}".encode())
            h.update(sd[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, modules: dict, meta: dict) -> None:
    """Write atomically: serialize to a temp file in the target dir, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"meta": dict(meta), "state": {k: m.state_dict() for k, m in modules.items()}}
    # serialize in memory first: torch.save embeds the target file name in the archive
    buf = io.BytesIO()
    torch.save(payload, buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def load_checkpoint(path, modules: dict) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    for k, m in modules.items():
        if k not in payload["state"]:
            raise KeyError(f"checkpoint {path} has no entry for {k!r}")
        m.load_state_dict(payload["state"][k])
    return payload["meta"]
