"""SNR sweeps, compression-ratio ablation, and parameter/FLOP accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .cat_codec import compressed_dim
from .channel import ChannelConfig, make_generator
from .rkd_pipeline import PipelineState, kd_loss, task_loss

DEFAULT_SNR_GRID = tuple(range(-10, 30, 5))


def top1_accuracy(y_hat: torch.Tensor, y: torch.Tensor) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    y_hat = torch.as_tensor(y_hat)
    y = torch.as_tensor(y)
    if y_hat.ndim != 2 or y_hat.shape[0] != y.shape[0]:
        raise ValueError(f"score matrix {tuple(y_hat.shape)} does not match {y.shape[0]} labels")
    if len(y) == 0:
        raise ValueError("no samples")
    # torch.argmax returns the first maximal index on CPU
    pred = torch.argmax(y_hat, dim=1)
    return float((pred == y).double().mean())


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class SweepRow:
    snr_db: float
    top1_accuracy: float
    task: Optional[float]
    kd: Optional[float]
    re: Optional[float]
    num_eval_samples: int


@dataclass
class SweepResult:
    rows: list
    metadata: dict = field(default_factory=dict)

    def accuracies(self) -> list[float]:
        return [r.top1_accuracy for r in self.rows]


def snr_sweep(system, snrs: Sequence[float], data, channel_cfg: ChannelConfig, trials: int = 10,
              seed: int = 0, teacher=None, metadata: Optional[dict] = None) -> SweepResult:
    """Mean accuracy over ``trials`` noise realizations at each SNR, in request order.

    Each (SNR index, trial) pair draws its noise from its own derived stream.
    """
    if not len(snrs):
        raise ValueError("need at least one SNR point")
    if trials < 1:
        raise ValueError("trials must be positive")
    x, y = data
    rows = []
    with torch.no_grad():
        for i, snr in enumerate(snrs):
            accs, tasks, kds, res = [], [], [], []
            for t in range(trials):
                gen = make_generator(derive_seed(seed, i, t))
                if isinstance(system, PipelineState):
                    out = system.forward(x, float(snr), channel_cfg, gen)
                    logits = out["logits"]
                    res.append(kd_loss(out["h"], out["h_tilde"]).item())
                    if teacher is not None:
                        kds.append(kd_loss(teacher(x), out["h_tilde"]).item())
                else:
                    logits = system.logits(x, float(snr), channel_cfg, gen)
                accs.append(top1_accuracy(logits, y))
                tasks.append(task_loss(logits, y).item())
            rows.append(SweepRow(
                float(snr), float(np.mean(accs)), float(np.mean(tasks)),
                float(np.mean(kds)) if kds else None, float(np.mean(res)) if res else None, len(y),
            ))
    meta = {"seed": seed, "trials": trials, "channel_family": channel_cfg.family.value}
    meta.update(metadata or {})
    return SweepResult(rows, meta)


def bypass_logits(system, x, snr_db: float = 200.0) -> torch.Tensor:
    """Logits with the transmit step skipped (power normalization kept).

    ``snr_db`` only feeds the codec's SNR conditioning.
    """
    with torch.no_grad():
        return system.logits(x, float(snr_db), None)


# -- parameter / FLOP accounting ---------------------------------------------------


def param_count(model) -> int:
    mods = model.values() if isinstance(model, dict) else [model]
    seen, total = set(), 0
    for m in mods:
        for p in m.parameters():
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                total += p.numel()
    return total


def _linear_flops(m: nn.Linear, inp, out) -> int:
    rows = out.numel() // m.out_features
    return 2 * rows * m.in_features * m.out_features + (rows * m.out_features if m.bias is not None else 0)


def _conv_flops(m: nn.Conv2d, inp, out) -> int:
    k = m.kernel_size[0] * m.kernel_size[1] * (m.in_channels // m.groups)
    return 2 * out.numel() * k + (out.numel() if m.bias is not None else 0)


def _mha_flops(m: nn.MultiheadAttention, inp, out) -> int:
    q = inp[0]
    b, length, d = q.shape if m.batch_first else (q.shape[1], q.shape[0], q.shape[2])
    proj = 4 * 2 * b * length * d * d  # q, k, v and output projections
    scores = 2 * b * length * length * d  # QK^T
    mix = 2 * b * length * length * d  # attention-weighted sum of V
    return proj + scores + mix


_FLOP_RULES = {nn.Linear: _linear_flops, nn.Conv2d: _conv_flops, nn.MultiheadAttention: _mha_flops}


@dataclass
class FlopReport:
    param_count: int
    flops: int
    layers: list  # (name, type, params, flops)
    header: str = "FLOPs count one multiply-accumulate as 2; batch size 1; elementwise ops ignored"


def param_flop_report(model, run: Optional[Callable[[], object]] = None) -> FlopReport:
    """Exact learnable-scalar count plus an analytic FLOP estimate for one forward.

    ``model`` is a module or a dict of modules; ``run`` performs a single-sample
    forward pass (without it only parameters are counted and flops is 0).
    """
    mods = model if isinstance(model, dict) else {"": model}
    layers, hooks = [], []
    for prefix, root in mods.items():
        # projections owned by attention modules are accounted for by the attention rule
        inner = {".".join(filter(None, (n, c))) for n, m in root.named_modules()
                 if isinstance(m, nn.MultiheadAttention) for c, _ in m.named_modules() if c}
        for name, sub in root.named_modules():
            if name in inner:
                continue
            rule = next((r for cls, r in _FLOP_RULES.items() if isinstance(sub, cls)), None)
            if rule is None:
                continue
            full = ".".join(p for p in (prefix, name) if p)
            entry = [full, type(sub).__name__, sum(p.numel() for p in sub.parameters() if p.requires_grad), 0]
            layers.append(entry)

            def hook(m, inp, out, entry=entry, rule=rule):
                o = out[0] if isinstance(out, tuple) else out
                entry[3] += rule(m, inp, o)

            hooks.append(sub.register_forward_hook(hook))
    try:
        if run is not None:
            with torch.no_grad():
                run()
    finally:
        for h in hooks:
            h.remove()
    return FlopReport(param_count(model), int(sum(e[3] for e in layers)), [tuple(e) for e in layers])


# -- compression ablation ----------------------------------------------------------


@dataclass
class AblationRow:
    ratio: float
    top1_accuracy: float
    transmitted_dim: int


def compression_ablation(system_factory: Callable[[float], PipelineState], ratios: Sequence[float], snr_db: float,
                         data, channel_cfg: ChannelConfig, trials: int = 10, seed: int = 0) -> list:
    """Build one system per ratio via ``system_factory`` and evaluate each at ``snr_db``."""
    rows = []
    for r in ratios:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"compression ratio must lie in [0, 1), got {r}")
        system = system_factory(float(r))
        sweep = snr_sweep(system, [snr_db], data, channel_cfg, trials, seed)
        dim = system.transmitted_dim
        embed = system.channel_encoder.cfg.embed_dim
        if dim != compressed_dim(embed, r):
            raise RuntimeError(f"system for ratio {r} transmits {dim} features, expected {compressed_dim(embed, r)}")
        rows.append(AblationRow(float(r), sweep.rows[0].top1_accuracy, dim))
    return rows


# -- persistence -------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "top1_accuracy", "task_loss", "kd_loss", "re_loss", "num_eval_samples"])
        for r in result.rows:
            w.writerow([_fmt(r.snr_db), _fmt(r.top1_accuracy), _fmt(r.task), _fmt(r.kd), _fmt(r.re),
                        r.num_eval_samples])


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ratio", "top1_accuracy", "transmitted_dim"])
        for r in rows:
            w.writerow([_fmt(r.ratio), _fmt(r.top1_accuracy), r.transmitted_dim])


def plot_curve(xs, series: dict, xlabel: str, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
