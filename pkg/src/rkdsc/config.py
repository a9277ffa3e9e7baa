"""Experiment configuration: YAML schema, presets, validation and digests."""
from __future__ import annotations

import copy
import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .cat_codec import CatConfig
from .channel import ChannelConfig
from .kdl_darts import SearchConfig
from .rkd_pipeline import Stage2Plan, StagePlan, TrainPlan
from .search_space import SearchSpaceSpec


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    source: str = "synthetic"  # synthetic | cifar10 | cifar100
    num_classes: int = 4
    samples_per_class: int = 150
    input_shape: tuple = (3, 8, 8)
    difficulty: str = "hard"
    root: Optional[str] = None
    # optional cap on corpus size (first N after a seeded shuffle), for CIFAR at desk scale
    max_samples: Optional[int] = None
    search_split: tuple = (0.45, 0.45, 0.10)
    train_split: tuple = (0.8, 0.1, 0.1)


@dataclass
class TeacherSpec:
    width: int = 48
    depth: int = 2
    pretrain_epochs: int = 5


@dataclass
class EvalSpec:
    snrs: tuple = tuple(float(s) for s in range(-10, 30, 5))
    trials: int = 10
    ablation_ratios: tuple = (0.8, 0.2, 0.1)
    ablation_snr_db: float = -10.0
    baseline: bool = True
    head_epochs: int = 30


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    search_space: SearchSpaceSpec = field(default_factory=SearchSpaceSpec)
    search: SearchConfig = field(default_factory=SearchConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    cat: CatConfig = field(default_factory=CatConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    out_dir: str = "runs"
    seed: int = 0
    preset: str = "toy"

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def run_id(self) -> str:
        return f"run-{self.digest()[:12]}"

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items() if k != "custom_candidates"}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, enum.Enum):
        return v.value
    return v


# -- presets -----------------------------------------------------------------------

# Hyperparameters that carry over unchanged at toy scale: lambda_J = 0.05,
# alpha temperature 1.0, penalty temperature 2.0, training SNR 5-20 dB.
PRESETS: dict[str, dict] = {
    "toy": {},
    "cifar10-like": {
        "data": {"num_classes": 10, "samples_per_class": 60, "input_shape": [3, 8, 8], "difficulty": "medium"},
        "cat": {"compression_ratio": 0.8},
    },
    "cifar100-like": {
        "data": {"num_classes": 20, "samples_per_class": 30, "input_shape": [3, 8, 8], "difficulty": "medium"},
        "cat": {"compression_ratio": 0.2},
    },
}

_SECTIONS = {
    "data": DataSpec,
    "search_space": SearchSpaceSpec,
    "search": SearchConfig,
    "teacher": TeacherSpec,
    "cat": CatConfig,
    "channel": ChannelConfig,
    "eval": EvalSpec,
}
_PLAN_SECTIONS = {"stage1": StagePlan, "stage2": Stage2Plan}
_TOP_SCALARS = {"out_dir", "seed", "preset"}
_HIDDEN_FIELDS = {"custom_candidates"}


# -- YAML with line numbers ----------------------------------------------------------


def _to_python(node, path=(), lines=None):
    """Convert a composed YAML node into plain Python, recording key line numbers."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k_node, v_node in node.value:
            key = k_node.value
            if key in out:
                raise ConfigError(f"line {k_node.start_mark.line + 1}: duplicate key {'.'.join(path + (key,))!r}")
            lines[path + (key,)] = k_node.start_mark.line + 1
            out[key] = _to_python(v_node, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, path, lines) for v in node.value]
    return yaml.safe_load(yaml.serialize(node))


def _load_yaml(text: str):
    lines: dict[tuple, int] = {}
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{where}malformed config: {getattr(exc, 'problem', exc)}") from exc
    if node is None:
        return {}, lines
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("config root must be a mapping")
    return _to_python(node, (), lines), lines


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _where(lines, path) -> str:
    ln = lines.get(tuple(path))
    return f"line {ln}: " if ln else ""


def _build(cls, values: dict, path: tuple, lines: dict):
    allowed = {f.name for f in fields(cls)} - _HIDDEN_FIELDS
    for key in values:
        if key not in allowed:
            raise ConfigError(
                f"{_where(lines, path + (key,))}unknown key {'.'.join(path + (key,))!r}; "
                f"allowed: {', '.join(sorted(allowed))}"
            )
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(lines, path)}invalid section {'.'.join(path)!r}: {exc}") from exc


def config_from_dict(raw: dict, lines: Optional[dict] = None) -> ExperimentConfig:
    lines = lines or {}
    for key in raw:
        if key not in _SECTIONS and key not in _TOP_SCALARS and key != "plan":
            raise ConfigError(f"{_where(lines, (key,))}unknown top-level key {key!r}")
    preset = raw.get("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError(f"{_where(lines, ('preset',))}unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], raw)

    sections = {name: _build(cls, merged.get(name) or {}, (name,), lines) for name, cls in _SECTIONS.items()}
    plan_raw = merged.get("plan") or {}
    for key in plan_raw:
        if key not in _PLAN_SECTIONS:
            raise ConfigError(f"{_where(lines, ('plan', key))}unknown key 'plan.{key}'")
    seed = merged.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{_where(lines, ('seed',))}seed must be a non-negative integer")
    plan = TrainPlan(
        **{k: _build(cls, plan_raw.get(k) or {}, ("plan", k), lines) for k, cls in _PLAN_SECTIONS.items()},
        seed=seed,
    )
    cfg = ExperimentConfig(
        plan=plan, out_dir=str(merged.get("out_dir", "runs")), seed=seed, preset=preset, **sections
    )
    # seed propagates into the stage configs that carry their own
    cfg.search.seed = seed
    cfg.search_space.in_channels = int(cfg.data.input_shape[0])
    validate(cfg, lines)
    return cfg


def validate(cfg: ExperimentConfig, lines: Optional[dict] = None) -> None:
    lines = lines or {}
    fd, ed = cfg.search_space.feature_dim, cfg.cat.embed_dim
    if fd != ed:
        raise ConfigError(
            f"{_where(lines, ('cat', 'embed_dim'))}cat.embed_dim ({ed}) must equal "
            f"search_space.feature_dim ({fd}); the teacher dimension follows search_space.feature_dim"
        )
    if cfg.data.source not in ("synthetic", "cifar10", "cifar100"):
        raise ConfigError(f"{_where(lines, ('data', 'source'))}unknown data.source {cfg.data.source!r}")
    if cfg.data.source != "synthetic" and not cfg.data.root:
        raise ConfigError(f"{_where(lines, ('data', 'root'))}data.root is required for {cfg.data.source}")
    for r in cfg.eval.ablation_ratios:
        if not 0.0 <= float(r) < 1.0:
            raise ConfigError(f"{_where(lines, ('eval', 'ablation_ratios'))}ablation ratio {r} outside [0, 1)")
    if not cfg.eval.snrs:
        raise ConfigError(f"{_where(lines, ('eval', 'snrs'))}eval.snrs must not be empty")
    n_cands = len(cfg.search_space.depths)
    if cfg.search.k_select > n_cands:
        raise ConfigError(
            f"{_where(lines, ('search', 'k_select'))}search.k_select ({cfg.search.k_select}) exceeds "
            f"the {n_cands} depth candidates per layer"
        )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw, lines = _load_yaml(path.read_text())
    return config_from_dict(raw, lines)


def replace_path(cfg: ExperimentConfig, dotted: str, value: Any) -> ExperimentConfig:
    """Return a re-validated copy with one field changed, e.g. ``cat.compression_ratio``."""
    d = cfg.to_dict()
    node = d
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node[p]
    node[parts[-1]] = value
    d["plan"].pop("seed", None)
    return config_from_dict(d)


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d["plan"].pop("seed", None)
    d["search"].pop("seed", None)
    d["search_space"].pop("in_channels", None)
    d.pop("out_dir")
    return yaml.safe_dump(d, sort_keys=True)

