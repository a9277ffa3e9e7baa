"""Experiment orchestration: search -> distill -> train -> eval (and ablate).

Every artifact of a run lives under ``<out_dir>/<run-id>/`` where the run id is
derived from the config digest, so a re-run with the same config and seed
lands in the same directory and reproduces the same files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import data as data_mod
from .cat_codec import CatConfig
from .config import ExperimentConfig, dump_config
from .eval_harness import (compression_ablation, param_flop_report, plot_curve, snr_sweep, write_ablation_csv,
                           write_sweep_csv)
from .kdl_darts import DiscreteArchitecture, search, write_search_log
from .rkd_pipeline import (DirectSystem, StagePlan, TeacherModel, build_pipeline, load_checkpoint, make_teacher,
                           save_checkpoint, stage1_distill, stage2_joint_train, train_task_head)
from .search_space import build_student

log = logging.getLogger(__name__)

COMMANDS = ("search", "distill", "train", "eval", "ablate", "all")

ARCH_FILE = "architecture.json"
SEARCH_LOG = "search_log.csv"
TEACHER_CKPT = "teacher.pt"
STAGE1_CKPT = "stage1.pt"
STAGE1_LOG = "stage1_log.csv"
STAGE2_CKPT = "stage2.pt"
STAGE2_LOG = "stage2_log.csv"
RESULTS = "results.csv"
BASELINE_RESULTS = "baseline_results.csv"
ABLATION = "ablation.csv"
MANIFEST = "manifest.json"


class MissingArtifact(RuntimeError):
    pass


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self._splits = {}
        self._teacher = None

    def path(self, name) -> Path:
        return self.dir / name

    def require(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(f"missing prerequisite artifact {p}; run the producing command first")
        return p

    # -- data and teacher ----------------------------------------------------------

    def dataset(self) -> data_mod.Dataset:
        d = self.cfg.data
        if d.source == "synthetic":
            ds = data_mod.make_synthetic(d.num_classes, d.samples_per_class, d.input_shape, d.difficulty,
                                         seed=self.cfg.seed)
        else:
            ds = data_mod.load_small_corpus(d.source, d.root)
        if d.max_samples is not None and d.max_samples < len(ds):
            idx = np.random.default_rng(self.cfg.seed).permutation(len(ds))[: d.max_samples]
            ds = ds.subset(np.sort(idx))
        return ds

    def splits(self, kind: str):
        if kind not in self._splits:
            fr = self.cfg.data.search_split if kind == "search" else self.cfg.data.train_split
            self._splits[kind] = data_mod.prepare_splits(self.dataset(), fr, self.cfg.seed)
        return self._splits[kind]

    def teacher(self) -> TeacherModel:
        if self._teacher is not None:
            return self._teacher
        t = self.cfg.teacher
        train = self.splits("train")[0]
        teacher = make_teacher(train.input_shape[0], self.cfg.search_space.feature_dim, t.width, t.depth,
                               seed=self.cfg.seed, pretrain_data=train.tensors(),
                               num_classes=train.num_classes, pretrain_epochs=t.pretrain_epochs)
        p = self.path(TEACHER_CKPT)
        if p.exists():
            load_checkpoint(p, {"teacher": teacher})
        else:
            save_checkpoint(p, {"teacher": teacher}, {"seed": self.cfg.seed})
        self._teacher = teacher
        return teacher

    # -- stages --------------------------------------------------------------------

    def do_search(self):
        cfg = self.cfg
        train, val, _ = self.splits("search")
        arch, rows = search(cfg.search_space, (train.tensors(), val.tensors()), cfg.search,
                            teacher=self.teacher(), num_classes=train.num_classes)
        arch.provenance["config_digest"] = cfg.digest()
        arch.provenance["data_digest"] = train.digest
        arch.save(self.path(ARCH_FILE))
        write_search_log(rows, self.path(SEARCH_LOG))
        return arch

    def student(self):
        arch = DiscreteArchitecture.load(self.require(ARCH_FILE))
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            return build_student(self.cfg.search_space, arch.layers)

    def do_distill(self):
        encoder = self.student()
        train = self.splits("train")[0]
        curves = stage1_distill(encoder, self.teacher(), train.tensors(), self.cfg.plan)
        save_checkpoint(self.path(STAGE1_CKPT), {"semantic_encoder": encoder},
                        {"seed": self.cfg.seed, "config_digest": self.cfg.digest()})
        _write_rows(self.path(STAGE1_LOG), ["epoch", "kd_loss"],
                    [[i + 1, v] for i, v in enumerate(curves["epoch_loss"])])
        return encoder

    def load_stage1(self):
        encoder = self.student()
        load_checkpoint(self.require(STAGE1_CKPT), {"semantic_encoder": encoder})
        return encoder

    def _pipeline(self, cat: CatConfig):
        encoder = self.load_stage1()
        return build_pipeline(encoder, cat, self.splits("train")[0].num_classes, seed=self.cfg.seed)

    def _train_pipeline(self, cat: CatConfig):
        state = self._pipeline(cat)
        rows = stage2_joint_train(state, self.teacher(), self.splits("train")[0].tensors(), self.cfg.plan,
                                  self.cfg.channel)
        return state, rows

    def do_train(self):
        state, rows = self._train_pipeline(self.cfg.cat)
        save_checkpoint(self.path(STAGE2_CKPT), state.modules(),
                        {"seed": self.cfg.seed, "config_digest": self.cfg.digest()})
        keys = ["epoch", "joint", "kd", "re", "task", "snr_mean", "snr_min", "snr_max"]
        _write_rows(self.path(STAGE2_LOG), keys, [[r[k] for k in keys] for r in rows])
        return state

    def load_stage2(self):
        ckpt = self.require(STAGE2_CKPT)
        state = self._pipeline(self.cfg.cat)
        load_checkpoint(ckpt, state.modules())
        return state

    def baseline(self):
        encoder = self.load_stage1()
        for p in encoder.parameters():
            p.requires_grad_(False)
        train = self.splits("train")[0]
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            head = nn.Linear(encoder.feature_dim, train.num_classes)
        train_task_head(encoder, head, train.tensors(), StagePlan(epochs=self.cfg.eval.head_epochs,
                                                                  lr=(5e-3, 5e-4)), seed=self.cfg.seed)
        return DirectSystem(encoder, head)

    def do_eval(self):
        cfg = self.cfg
        state = self.load_stage2()
        test = self.splits("train")[2]
        xy = test.tensors()
        meta = {"config_digest": cfg.digest(), "data_digest": test.digest}
        result = snr_sweep(state, cfg.eval.snrs, xy, cfg.channel, cfg.eval.trials, cfg.seed,
                           teacher=self.teacher(), metadata=meta)
        write_sweep_csv(result, self.path(RESULTS))
        series = {"stage 2 (CAT)": result.accuracies()}
        if cfg.eval.baseline:
            base = snr_sweep(self.baseline(), cfg.eval.snrs, xy, cfg.channel, cfg.eval.trials, cfg.seed,
                             metadata=meta)
            write_sweep_csv(base, self.path(BASELINE_RESULTS))
            series["stage 1 only (direct)"] = base.accuracies()
        plot_curve(list(cfg.eval.snrs), series, "SNR (dB)", self.path("accuracy_vs_snr.png"),
                   f"{cfg.channel.family.value.upper()} channel")
        self._write_report(state, xy[0][:1])
        return result

    def _write_report(self, state, x1):
        mods = state.modules()

        def run():
            state.logits(x1, 10.0, None)

        report = param_flop_report(mods, run)
        per_module = {k: param_flop_report(m).param_count for k, m in mods.items()}
        body = {
            "convention": report.header,
            "param_count": report.param_count,
            "flops": report.flops,
            "per_module_params": per_module,
            "transmitted_dim": state.transmitted_dim,
            "layers": [{"name": n, "type": t, "params": p, "flops": f} for n, t, p, f in report.layers],
        }
        self.path("params_flops.json").write_text(json.dumps(body, indent=2) + "\n")

    def do_ablate(self):
        cfg = self.cfg
        test = self.splits("train")[2]

        def factory(ratio):
            cat = CatConfig(**{**cfg.cat.__dict__, "compression_ratio": ratio})
            state, _ = self._train_pipeline(cat)
            return state

        rows = compression_ablation(factory, cfg.eval.ablation_ratios, cfg.eval.ablation_snr_db, test.tensors(),
                                    cfg.channel, cfg.eval.trials, cfg.seed)
        write_ablation_csv(rows, self.path(ABLATION))
        ordered = sorted(rows, key=lambda r: r.ratio)
        plot_curve([r.ratio for r in ordered], {f"{cfg.eval.ablation_snr_db:g} dB": [r.top1_accuracy for r in ordered]},
                   "compression ratio", self.path("accuracy_vs_ratio.png"))
        return rows

    # -- manifest ------------------------------------------------------------------

    def write_manifest(self, commands):
        mpath = self.path(MANIFEST)
        prior = json.loads(mpath.read_text()) if mpath.exists() else {}
        done = list(prior.get("commands", []))
        for c in commands:
            if c not in done:
                done.append(c)
        artifacts = {
            p.name: file_digest(p)
            for p in sorted(self.dir.iterdir())
            if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp")
        }
        datasets = {kind: [s.digest for s in splits] for kind, splits in sorted(self._splits.items())}
        manifest = {
            "run_id": self.cfg.run_id,
            "config_digest": self.cfg.digest(),
            "seed": self.cfg.seed,
            "commands": done,
            "dataset_digests": {**prior.get("dataset_digests", {}), **datasets},
            "artifacts": artifacts,
        }
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def run(command: str, cfg: ExperimentConfig) -> Run:
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; expected one of {COMMANDS}")
    torch.use_deterministic_algorithms(True)
    r = Run(cfg)
    r.path("config.yaml").write_text(dump_config(cfg))
    steps = ["search", "distill", "train", "eval"] if command == "all" else [command]
    for step in steps:
        log.info("running %s in %s", step, r.dir)
        getattr(r, f"do_{step}")()
    r.write_manifest(steps)
    return r
