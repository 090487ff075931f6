"""Synthetic partial-domain-adaptation tasks, CSV I/O and batching.

Training code only ever receives a :class:`TrainData`; target labels and
the shared-class oracle live in a separate :class:`EvalStore`.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    dim: int = 2
    n_source_classes: int = 8
    shared: tuple[int, ...] = (0, 1, 2, 3)
    source_per_class: int = 100
    target_per_class: int = 100
    rotation_deg: float = 30.0
    translation: tuple[float, ...] = (1.0, -0.5)
    scale: float = 1.2
    noise: float = 0.35
    radius: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise DatasetError("task.dim must be >= 2")
        if self.n_source_classes < 2:
            raise DatasetError("task.n_source_classes must be >= 2")
        if not self.shared:
            raise DatasetError("task.shared must be non-empty")
        if len(set(self.shared)) != len(self.shared) or not all(0 <= c < self.n_source_classes for c in self.shared):
            raise DatasetError(f"task.shared must be distinct classes in [0, {self.n_source_classes})")
        if self.source_per_class < 1 or self.target_per_class < 1:
            raise DatasetError("per-class counts must be >= 1")
        if len(self.translation) > self.dim:
            raise DatasetError("task.translation longer than task.dim")
        if self.scale <= 0 or self.noise < 0:
            raise DatasetError("task.scale must be > 0 and task.noise >= 0")


@dataclass(frozen=True)
class TrainData:
    """Everything the trainer may see."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    n_classes: int

    @property
    def dim(self) -> int:
        return int(self.source_x.shape[1])


@dataclass(frozen=True)
class EvalStore:
    """Held-out target labels (-1 = unknown) and per-source-sample shared-class bits."""

    target_y: np.ndarray
    oracle: np.ndarray


@dataclass(frozen=True)
class PdaTask:
    train: TrainData
    evaluation: EvalStore
    shared: tuple[int, ...] = field(default=())

    @property
    def source_classes(self) -> set[int]:
        return set(range(self.train.n_classes))

    @property
    def target_classes(self) -> set[int]:
        return set(self.shared)


def class_means(spec: TaskSpec) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.n_source_classes) / spec.n_source_classes
    mu = np.zeros((spec.n_source_classes, spec.dim))
    mu[:, 0] = spec.radius * np.cos(angles)
    mu[:, 1] = spec.radius * np.sin(angles)
    return mu


def domain_shift(x: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Scale, then rotate the first two coordinates, then translate."""
    th = np.deg2rad(spec.rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    out = spec.scale * x
    out[:, :2] = out[:, :2] @ rot.T
    t = np.zeros(spec.dim)
    t[: len(spec.translation)] = spec.translation
    return out + t


def generate_synthetic_pda(spec: TaskSpec) -> PdaTask:
    rng = np.random.default_rng(spec.seed)
    mu = class_means(spec)
    ys = np.repeat(np.arange(spec.n_source_classes), spec.source_per_class)
    xs = mu[ys] + spec.noise * rng.standard_normal((ys.size, spec.dim))
    yt = np.repeat(np.array(sorted(spec.shared)), spec.target_per_class)
    xt = domain_shift(mu[yt], spec) + spec.noise * rng.standard_normal((yt.size, spec.dim))
    oracle = np.isin(ys, spec.shared)
    train = TrainData(xs, ys, xt, spec.n_source_classes)
    return PdaTask(train, EvalStore(yt, oracle), tuple(sorted(spec.shared)))


# ---------------------------------------------------------------------------
# CSV contract: domain,label,f0,...,f{d-1}


def save_csv_dataset(task: PdaTask, path) -> None:
    d = task.train.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label"] + [f"f{i}" for i in range(d)])
        for x, y in zip(task.train.source_x, task.train.source_y):
            w.writerow(["source", int(y)] + [repr(float(v)) for v in x])
        for x, y in zip(task.train.target_x, task.evaluation.target_y):
            w.writerow(["target", int(y)] + [repr(float(v)) for v in x])


def load_csv_dataset(path) -> PdaTask:
    text = Path(path).read_text(encoding="utf-8")
    return parse_csv_dataset(text)


def parse_csv_dataset(text: str) -> PdaTask:
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise DatasetError("line 1: empty file") from None
    d = len(header) - 2
    if d < 1 or header[:2] != ["domain", "label"] or header[2:] != [f"f{i}" for i in range(d)]:
        raise DatasetError("line 1: header must be domain,label,f0,...,f{d-1}")
    src_x, src_y, tgt_x, tgt_y = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise DatasetError(f"line {lineno}: expected {d + 2} fields, got {len(row)}")
        domain, label = row[0], row[1]
        try:
            y = int(label)
        except ValueError:
            raise DatasetError(f"line {lineno}: label {label!r} is not an integer") from None
        try:
            x = [float(v) for v in row[2:]]
        except ValueError:
            raise DatasetError(f"line {lineno}: non-numeric feature") from None
        if not np.all(np.isfinite(x)):
            raise DatasetError(f"line {lineno}: non-finite feature")
        if domain == "source":
            if y < 0:
                raise DatasetError(f"line {lineno}: source row needs a label")
            src_x.append(x); src_y.append(y)
        elif domain == "target":
            if y < -1:
                raise DatasetError(f"line {lineno}: target label must be >= -1")
            tgt_x.append(x); tgt_y.append(y)
        else:
            raise DatasetError(f"line {lineno}: domain must be 'source' or 'target', got {domain!r}")
    if not src_x or not tgt_x:
        raise DatasetError("file needs at least one source and one target row")
    src_y = np.array(src_y, dtype=np.int64)
    tgt_y = np.array(tgt_y, dtype=np.int64)
    n_classes = int(src_y.max()) + 1
    if np.any(tgt_y >= n_classes):
        raise DatasetError("target label outside the source label space")
    shared = tuple(sorted(set(tgt_y[tgt_y >= 0].tolist())))
    oracle = np.isin(src_y, shared) if shared else np.zeros(src_y.size, dtype=bool)
    train = TrainData(np.array(src_x), src_y, np.array(tgt_x), n_classes)
    return PdaTask(train, EvalStore(tgt_y, oracle), shared)


# ---------------------------------------------------------------------------
# batching


class _Stream:
    """Epoch-wise shuffled indices without replacement, wrapping at epoch end."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, b: int) -> np.ndarray:
        out = []
        while b > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            k = min(b, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + k])
            self.pos += k
            b -= k
        return np.concatenate(out)


class Batcher:
    def __init__(self, data: TrainData, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.data = data
        self.b = batch_size
        self.src = _Stream(len(data.source_x), rng)
        self.tgt = _Stream(len(data.target_x), rng)

    def next_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return self.src.take(self.b), self.tgt.take(self.b)

    def next_batch(self):
        """((source_x, source_y), target_x) for one step."""
        i, j = self.next_indices()
        return (self.data.source_x[i], self.data.source_y[i]), self.data.target_x[j]


def next_batch(batcher: Batcher):
    return batcher.next_batch()
