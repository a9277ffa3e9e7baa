"""Desk-scale datasets: procedural class-conditional images and small CIFAR corpora."""
from __future__ import annotations

import hashlib
import pickle
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np
import torch

DIFFICULTY_NOISE = {"trivial": 0.1, "easy": 0.5, "medium": 1.0, "hard": 2.0}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DataError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()[:16]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def tensors(self, dtype=torch.float32):
        return torch.as_tensor(self.inputs, dtype=dtype), torch.as_tensor(self.labels, dtype=torch.long)


def _smooth_template(rng: np.random.Generator, shape) -> np.ndarray:
    c, h, w = shape
    fh, fw = max(1, h // 4), max(1, w // 4)
    coarse = rng.standard_normal((c, -(-h // fh), -(-w // fw)))
    t = coarse.repeat(fh, axis=1).repeat(fw, axis=2)[:, :h, :w]
    return t / (t.std() + 1e-12)


def make_synthetic(num_classes: int, samples_per_class: int, input_shape=(3, 8, 8),
                   difficulty: str = "easy", seed: int = 0) -> Dataset:
    """Gaussian-textured class prototypes plus i.i.d. pixel noise.

    Each class owns a smooth random template; a sample is its template scaled
    by a random gain in [0.8, 1.2] plus noise whose std is set by ``difficulty``.
    """
    if num_classes < 1 or samples_per_class < 1:
        raise DataError("counts must be positive")
    if difficulty not in DIFFICULTY_NOISE:
        raise DataError(f"unknown difficulty {difficulty!r}; expected one of {sorted(DIFFICULTY_NOISE)}")
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    templates = np.stack([_smooth_template(rng, shape) for _ in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    gains = rng.uniform(0.8, 1.2, size=len(labels))[:, None, None, None]
    noise = rng.standard_normal((len(labels),) + shape) * DIFFICULTY_NOISE[difficulty]
    inputs = templates[labels] * gains + noise
    return Dataset(inputs.astype(np.float32), labels.astype(np.int64), num_classes)


# -- CIFAR -------------------------------------------------------------------------

_CIFAR = {
    "cifar10": ("cifar-10-batches-py", [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"], b"labels", 10),
    "cifar100": ("cifar-100-python", ["train", "test"], b"fine_labels", 100),
}


def _read_pickle(fh):
    try:
        return pickle.load(fh, encoding="bytes")
    except Exception as exc:  # corrupt archive member
        raise DataError(f"corrupt CIFAR batch: {exc}") from exc


def load_small_corpus(name: str, root_path) -> Dataset:
    """Load CIFAR-10/100 from the official python distribution (extracted dir or .tar.gz)."""
    key = name.lower().replace("-", "")
    if key not in _CIFAR:
        raise DataError(f"unknown corpus {name!r}; expected one of {sorted(_CIFAR)}")
    folder, members, label_key, n_classes = _CIFAR[key]
    root = Path(root_path)
    batches = []
    folder_path = root / folder
    if folder_path.is_dir():
        for m in members:
            p = folder_path / m
            if not p.exists():
                raise DataError(f"missing CIFAR file {p}")
            with open(p, "rb") as fh:
                batches.append(_read_pickle(fh))
    else:
        archives = list(root.glob(f"{key.replace('cifar', 'cifar-')}-python.tar.gz"))
        if not archives:
            raise DataError(f"{name} not found under {root}: expected directory {folder_path} or the .tar.gz archive")
        with tarfile.open(archives[0]) as tar:
            for m in members:
                try:
                    fh = tar.extractfile(f"{folder}/{m}")
                except KeyError as exc:
                    raise DataError(f"archive {archives[0]} lacks {folder}/{m}") from exc
                batches.append(_read_pickle(fh))
    try:
        x = np.concatenate([b[b"data"] for b in batches]).reshape(-1, 3, 32, 32)
        y = np.concatenate([np.asarray(b[label_key]) for b in batches])
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed {name} batches: {exc}") from exc
    return Dataset((x.astype(np.float32) / 255.0), y.astype(np.int64), n_classes)


# -- splitting and normalization ---------------------------------------------------


def split(ds: Dataset, fractions: Sequence[float], seed: int = 0):
    """Stratified split into (train, val, test) with disjoint, exhaustive indices."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three positive numbers summing to 1, got {list(fractions)}")
    rng = np.random.default_rng(seed)
    n = len(ds)
    # overall target sizes by largest remainder, then distributed over classes
    targets = _largest_remainder(fr * n)
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]
    class_sizes = np.array([len(b) for b in by_class])
    alloc = _stratified_counts(class_sizes, fr, targets)
    parts = [[], [], []]
    for idx, counts in zip(by_class, alloc):
        start = 0
        for j in range(3):
            parts[j].append(idx[start:start + counts[j]])
            start += counts[j]
    return tuple(ds.subset(np.sort(np.concatenate(p)) if p else []) for p in parts)


def _stratified_counts(class_sizes: np.ndarray, fr: np.ndarray, targets) -> np.ndarray:
    """Round class_sizes x fr to integers with exact row and column sums.

    Every entry ends at floor or ceil of its proportional share; the +1
    increments are placed with a max-flow so both marginals are met.
    """
    share = np.outer(class_sizes, fr)
    alloc = np.floor(share + 1e-9).astype(int)
    row_need = class_sizes - alloc.sum(1)
    col_need = np.asarray(targets) - alloc.sum(0)
    g = nx.DiGraph()
    for c, r in enumerate(row_need):
        if r > 0:
            g.add_edge("s", ("r", c), capacity=int(r))
            for j in range(len(fr)):
                if share[c, j] - alloc[c, j] > 1e-9:
                    g.add_edge(("r", c), ("c", j), capacity=1)
    for j, d in enumerate(col_need):
        if d > 0:
            g.add_edge(("c", j), "t", capacity=int(d))
    if row_need.sum() == 0:
        return alloc
    value, flow = nx.maximum_flow(g, "s", "t")
    if value != row_need.sum():
        raise DataError("could not balance stratified split sizes")
    for c in range(len(class_sizes)):
        for j in range(len(fr)):
            alloc[c, j] += flow.get(("r", c), {}).get(("c", j), 0)
    return alloc


def _largest_remainder(x: np.ndarray) -> list[int]:
    base = np.floor(x).astype(int)
    rem = int(round(x.sum())) - base.sum()
    for j in np.argsort(-(x - base), kind="stable")[:rem]:
        base[j] += 1
    return base.tolist()


def channel_stats(ds: Dataset):
    axes = (0,) + tuple(range(2, ds.inputs.ndim))
    mean = ds.inputs.mean(axis=axes, keepdims=True)[0]
    std = ds.inputs.std(axis=axes, keepdims=True)[0]
    return mean, np.where(std > 0, std, 1.0)


def normalize(ds: Dataset, mean, std) -> Dataset:
    return Dataset(((ds.inputs - mean) / std).astype(np.float32), ds.labels, ds.num_classes)


def prepare_splits(ds: Dataset, fractions, seed: int = 0):
    """Split, then standardize all three splits with train-split channel statistics."""
    train, val, test = split(ds, fractions, seed)
    mean, std = channel_stats(train)
    return tuple(normalize(s, mean, std) for s in (train, val, test))
