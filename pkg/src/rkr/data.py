"""Synthetic task generators and RKRD file conversion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import DatasetFile, read_dataset, write_dataset
from .tensor import make_rng
from .trainer import TaskDataset


class DataConfigError(ValueError):
    pass


def _simplex(n: int, dirs: np.ndarray) -> np.ndarray:
    """``n`` points with pairwise distance 1 along the rows of ``dirs`` (n x d orthonormal)."""
    pts = dirs / np.sqrt(2.0)
    return pts - pts.mean(axis=0)


def _orthonormal(rng, d: int, k: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return q.T


def generate_synthetic_tasks(
    n_tasks: int,
    classes_per_task: int = 2,
    input_shape=(16,),
    separation: float = 6.0,
    conflict_mode: bool = False,
    seed: int = 0,
    n_train: int = 100,
    n_test: int = 100,
) -> list[TaskDataset]:
    """Gaussian class clusters (unit variance) with pairwise mean distance ``separation``.

    Without ``conflict_mode`` every task lives around its own random centre.
    With it, all tasks share one centre and one 2-D plane of the input space
    and their class layouts are rotated against each other, so a network shared
    across tasks has to move its decision boundaries to fit a new task.
    ``n_train``/``n_test`` are per class. Global class ids are
    ``task_index * classes_per_task + k``.
    """
    input_shape = tuple(int(s) for s in np.atleast_1d(input_shape))
    d = int(np.prod(input_shape))
    if n_tasks < 1 or classes_per_task < 2:
        raise DataConfigError("need at least one task and two classes per task")
    if separation <= 0 or n_train < 1 or n_test < 1:
        raise DataConfigError("separation and split sizes must be positive")
    if (conflict_mode and d < 2) or classes_per_task > d:
        raise DataConfigError(f"{classes_per_task} classes do not fit in {d} input dimensions")
    rng = make_rng(seed, 7)
    plane = _orthonormal(rng, d, 2)
    tasks = []
    for t in range(n_tasks):
        if conflict_mode:
            angle = np.pi * t / n_tasks
            rot = np.array([[np.cos(angle), np.sin(angle)], [-np.sin(angle), np.cos(angle)]])
            if classes_per_task == 2:
                dirs = np.array([[1.0, 0.0], [-1.0, 0.0]]) @ rot @ plane
                means = separation * dirs / 2.0
            else:
                ang = 2 * np.pi * np.arange(classes_per_task) / classes_per_task + angle
                ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) @ plane
                means = separation * ring / (2 * np.sin(np.pi / classes_per_task))
        else:
            centre = rng.standard_normal(d) * separation
            means = centre + separation * _simplex(classes_per_task, _orthonormal(rng, d, classes_per_task))
        splits = []
        for n in (n_train, n_test):
            y = np.repeat(np.arange(classes_per_task), n)
            x = means[y] + rng.standard_normal((len(y), d))
            perm = rng.permutation(len(y))
            splits.append((x[perm].astype(np.float32).reshape(-1, *input_shape), y[perm] + t * classes_per_task))
        (xtr, ytr), (xte, yte) = splits
        tasks.append(TaskDataset(t + 1, xtr, ytr, xte, yte, np.arange(classes_per_task) + t * classes_per_task))
    return tasks


def nearest_centroid_accuracy(task: TaskDataset) -> float:
    xtr = task.x_train.reshape(len(task.x_train), -1).astype(np.float64)
    xte = task.x_test.reshape(len(task.x_test), -1).astype(np.float64)
    cents = np.stack([xtr[task.y_train == c].mean(axis=0) for c in task.classes])
    pred = task.classes[((xte[:, None, :] - cents[None]) ** 2).sum(-1).argmin(axis=1)]
    return float(np.mean(pred == task.y_test) * 100.0)


def write_tasks(directory, tasks: list[TaskDataset]) -> list[Path]:
    directory = Path(directory)
    paths = []
    for t in tasks:
        for split, x, y in (("train", t.x_train, t.y_train), ("test", t.x_test, t.y_test)):
            p = directory / f"task_{t.task_id}_{split}.rkrd"
            meta = {"task_id": t.task_id, "split": split, "classes": t.classes.tolist()}
            write_dataset(p, DatasetFile(np.asarray(x, np.float32), y, t.n_classes, meta=meta))
            paths.append(p)
    return paths


def read_tasks(directory) -> list[TaskDataset]:
    directory = Path(directory)
    tasks = []
    for p in sorted(directory.glob("task_*_train.rkrd"), key=lambda q: int(q.name.split("_")[1])):
        tr = read_dataset(p)
        te = read_dataset(p.with_name(p.name.replace("_train", "_test")))
        tasks.append(TaskDataset(tr.meta["task_id"], tr.inputs, tr.labels, te.inputs, te.labels, np.asarray(tr.meta["classes"])))
    if not tasks:
        raise DataConfigError(f"no task_*_train.rkrd files in {directory}")
    return tasks


# ---------------------------------------------------------------- zero-shot tasks


@dataclass
class GzslTask:
    """One zero-shot dataset. Labels are local class ids indexing ``embeddings``."""

    task_id: int
    embeddings: np.ndarray
    seen: np.ndarray
    unseen: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.embeddings)


def generate_gzsl_tasks(
    n_tasks: int = 3,
    n_classes: int = 12,
    n_unseen: int = 4,
    feature_dim: int = 64,
    embedding_dim: int = 16,
    embedding_rank: int = 5,
    noise: float = 0.3,
    n_train: int = 80,
    n_test: int = 20,
    seed: int = 0,
) -> list[GzslTask]:
    """Class embeddings are random unit vectors inside an ``embedding_rank``-dim
    subspace; features are a task-specific linear image of the embedding plus
    Gaussian noise.

    The seen classes span the embedding subspace, so unseen classes are
    expressible through them.

    Every task has its own feature map, so an encoder fitted to one task maps
    another task's features somewhere else. Training examples exist only for
    seen classes; the test split covers all classes.
    """
    if n_unseen < 1 or n_unseen >= n_classes:
        raise DataConfigError("need at least one seen and one unseen class")
    if not 1 <= embedding_rank <= min(embedding_dim, n_classes - n_unseen):
        raise DataConfigError(f"embedding_rank must lie in [1, min(embedding_dim, seen classes)], got {embedding_rank}")
    rng = make_rng(seed, 11)
    tasks = []
    for t in range(n_tasks):
        basis = _orthonormal(rng, embedding_dim, embedding_rank)
        emb = rng.standard_normal((n_classes, embedding_rank)) @ basis
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        proj = rng.standard_normal((embedding_dim, feature_dim)) / np.sqrt(embedding_dim)
        offset = rng.standard_normal(feature_dim) * 0.5
        order = rng.permutation(n_classes)
        unseen, seen = np.sort(order[:n_unseen]), np.sort(order[n_unseen:])

        def sample(classes, n):
            y = np.repeat(classes, n)
            x = emb[y] @ proj + offset + noise * rng.standard_normal((len(y), feature_dim))
            perm = rng.permutation(len(y))
            return x[perm].astype(np.float32), y[perm]

        xtr, ytr = sample(seen, n_train)
        xte, yte = sample(np.arange(n_classes), n_test)
        tasks.append(GzslTask(t + 1, emb.astype(np.float32), seen, unseen, xtr, ytr, xte, yte))
    return tasks


def write_gzsl_tasks(directory, tasks: list[GzslTask]) -> list[Path]:
    directory = Path(directory)
    paths = []
    for t in tasks:
        meta = {"task_id": t.task_id, "seen": t.seen.tolist(), "unseen": t.unseen.tolist()}
        for split, x, y in (("train", t.x_train, t.y_train), ("test", t.x_test, t.y_test)):
            p = directory / f"gzsl_{t.task_id}_{split}.rkrd"
            write_dataset(p, DatasetFile(x, y, t.n_classes, embeddings=t.embeddings, meta={**meta, "split": split}))
            paths.append(p)
    return paths


def read_gzsl_tasks(directory) -> list[GzslTask]:
    directory = Path(directory)
    tasks = []
    for p in sorted(directory.glob("gzsl_*_train.rkrd"), key=lambda q: int(q.name.split("_")[1])):
        tr = read_dataset(p)
        te = read_dataset(p.with_name(p.name.replace("_train", "_test")))
        if tr.embeddings is None:
            raise DataConfigError(f"{p} has no class-embedding table")
        m = tr.meta
        tasks.append(
            GzslTask(m["task_id"], tr.embeddings, np.asarray(m["seen"]), np.asarray(m["unseen"]), tr.inputs, tr.labels, te.inputs, te.labels)
        )
    if not tasks:
        raise DataConfigError(f"no gzsl_*_train.rkrd files in {directory}")
    return tasks
