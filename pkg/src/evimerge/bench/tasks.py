"""Synthetic multi-task classification data.

Each task lives around its own center in a shared feature space.  Its
classes are Gaussian blobs offset from that center along task-specific
random directions, with an anisotropic, randomly rotated noise model.
Labels of task k occupy a contiguous block of the unified label space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLITS = ("pt", "ft", "aux", "te")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    labels: tuple[int, ...]
    center: np.ndarray = field(repr=False)
    class_means: np.ndarray = field(repr=False)
    noise_transform: np.ndarray = field(repr=False)
    split_sizes: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.labels)


@dataclass
class TaskData:
    spec: TaskSpec
    x: dict[str, np.ndarray]
    y: dict[str, np.ndarray]

    @property
    def task_id(self) -> int:
        return self.spec.task_id


@dataclass(frozen=True)
class TaskGeometry:
    task_shift: float = 4.0
    class_sep: float = 2.0
    noise: float = 1.0


def _sample(spec: TaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    local = rng.integers(0, spec.num_classes, size=n)
    z = rng.normal(size=(n, spec.class_means.shape[1]))
    x = spec.class_means[local] + z @ spec.noise_transform
    return x, np.asarray(spec.labels)[local]


def unified_label_count(tasks) -> int:
    labels = set()
    for t in tasks:
        labels.update((t.spec if isinstance(t, TaskData) else t).labels)
    return len(labels)


def generate_tasks(num_tasks: int, classes_per_task: int | list[int], feature_dim: int,
                   samples: dict[str, int], seed: int,
                   geometry: TaskGeometry = TaskGeometry()) -> list[TaskData]:
    """``samples`` maps split name (pt, ft, aux, te) to per-task sample counts."""
    if num_tasks < 1:
        raise ValueError("need at least one task")
    counts = [classes_per_task] * num_tasks if isinstance(classes_per_task, int) else list(classes_per_task)
    if len(counts) != num_tasks or min(counts) < 1:
        raise ValueError("classes_per_task must give a positive count for every task")
    unknown = set(samples) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown split names {sorted(unknown)}")
    tasks = []
    offset = 0
    for k in range(num_tasks):
        rng = np.random.default_rng([seed, 1000 + k])
        center = rng.normal(size=feature_dim)
        center *= geometry.task_shift / np.linalg.norm(center)
        basis, _ = np.linalg.qr(rng.normal(size=(feature_dim, feature_dim)))
        means = center + geometry.class_sep * basis[: counts[k]]
        rot, _ = np.linalg.qr(rng.normal(size=(feature_dim, feature_dim)))
        transform = geometry.noise * np.diag(rng.uniform(0.5, 1.5, feature_dim)) @ rot
        spec = TaskSpec(k, tuple(range(offset, offset + counts[k])), center, means, transform,
                        dict(samples), seed)
        offset += counts[k]
        xs, ys = {}, {}
        for s_id, split in enumerate(SPLITS):
            n = int(samples.get(split, 0))
            xs[split], ys[split] = _sample(spec, n, np.random.default_rng([seed, 1000 + k, s_id]))
        tasks.append(TaskData(spec, xs, ys))
    return tasks


def stack_split(tasks: list[TaskData], split: str) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([t.x[split] for t in tasks]), np.concatenate([t.y[split] for t in tasks]))


def save_tasks(path, tasks: list[TaskData]) -> None:
    arrays = {}
    for t in tasks:
        k = t.task_id
        arrays[f"t{k}.labels"] = np.asarray(t.spec.labels)
        arrays[f"t{k}.center"] = t.spec.center
        arrays[f"t{k}.class_means"] = t.spec.class_means
        arrays[f"t{k}.noise_transform"] = t.spec.noise_transform
        arrays[f"t{k}.seed"] = np.asarray(t.spec.seed)
        for split in SPLITS:
            arrays[f"t{k}.{split}.x"] = t.x[split]
            arrays[f"t{k}.{split}.y"] = t.y[split]
    arrays["num_tasks"] = np.asarray(len(tasks))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_tasks(path) -> list[TaskData]:
    with np.load(path) as z:
        tasks = []
        for k in range(int(z["num_tasks"])):
            xs = {s: z[f"t{k}.{s}.x"] for s in SPLITS}
            ys = {s: z[f"t{k}.{s}.y"] for s in SPLITS}
            spec = TaskSpec(k, tuple(int(v) for v in z[f"t{k}.labels"]), z[f"t{k}.center"],
                            z[f"t{k}.class_means"], z[f"t{k}.noise_transform"],
                            {s: len(xs[s]) for s in SPLITS}, int(z[f"t{k}.seed"]))
            tasks.append(TaskData(spec, xs, ys))
    return tasks
