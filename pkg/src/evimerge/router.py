"""Debiased router and the discrepancy-aware contrastive merge objective."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .adjacency import (
    ADSFactors,
    EpsilonPolicy,
    RadiusPolicy,
    build_adjacency,
    compute_ads,
    partition_batch,
)
from .evidential import LOG_FLOOR, EvidentialHead, TrainingDiverged
from .network import MergedBackbone, pooled_features
from .params import MergeWeights, ParameterArchive, TaskVector, merge_parameters

log = logging.getLogger(__name__)

CLAMP_DELTA = 1e-6


@dataclass
class BDConfig:
    eta: float = 0.1
    temperature: float = 0.5
    epsilon: EpsilonPolicy = field(default_factory=EpsilonPolicy)
    radius: RadiusPolicy = field(default_factory=RadiusPolicy)
    mode: str = "layer"
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-2
    seed: int = 0
    router_hidden: int = 32
    factors: ADSFactors = field(default_factory=ADSFactors)

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.mode not in ("task", "layer"):
            raise ValueError(f"unknown mode {self.mode!r}")


# ---------------------------------------------------------------------------
# weight producers


class RouterNet:
    """Two-layer perceptron (tanh hidden) producing softmax merge weights.

    The output layer starts at zero so an untrained router yields the
    uniform merge for every input.
    """

    def __init__(self, in_dim: int, num_tasks: int, hidden: int = 32, mode: str = "task",
                 layer_count: int = 1, rng: np.random.Generator | None = None):
        if num_tasks < 1:
            raise ValueError("K=0: the router needs at least one task vector")
        rng = rng or np.random.default_rng(0)
        self.mode = mode
        self.num_tasks = num_tasks
        self.layer_count = layer_count if mode == "layer" else 1
        out = num_tasks * self.layer_count
        self.w1 = T.Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden)), requires_grad=True)
        self.b1 = T.Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = T.Tensor(np.zeros((hidden, out)), requires_grad=True)
        self.b2 = T.Tensor(np.zeros(out), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[T.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, features) -> T.Tensor:
        features = T.as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise T.DimensionError(f"router expects features of width {self.in_dim}, got shape {features.shape}")
        hidden = T.tanh(T.linear_forward(features, self.w1, self.b1))
        return T.linear_forward(hidden, self.w2, self.b2)

    def __call__(self, features) -> T.Tensor:
        """Per-sample weights: (N, K) task-wise, (N, K, layer_count) layer-wise."""
        z = self.logits(features)
        if self.mode == "task":
            return T.softmax(z, axis=1)
        return T.softmax(z.reshape(z.shape[0], self.num_tasks, self.layer_count), axis=1)

    def to_archive(self) -> ParameterArchive:
        return ParameterArchive.from_dict(
            {"router.w1": (0, self.w1.data), "router.b1": (0, self.b1.data),
             "router.w2": (1, self.w2.data), "router.b2": (1, self.b2.data)},
            {"role": "router", "mode": self.mode, "num_tasks": str(self.num_tasks),
             "layer_count": str(self.layer_count)},
        )

    @classmethod
    def from_archive(cls, archive: ParameterArchive) -> "RouterNet":
        if archive.metadata.get("role") != "router":
            raise ValueError("archive is not a router (metadata role mismatch)")
        w1 = archive["router.w1"]
        r = cls(w1.shape[0], int(archive.metadata["num_tasks"]), w1.shape[1], archive.metadata["mode"],
                int(archive.metadata["layer_count"]))
        for t, name in zip(r.parameters(), ("router.w1", "router.b1", "router.w2", "router.b2")):
            t.data = archive[name].copy()
        return r


class StaticWeights:
    """One global softmax-parametrized weight vector shared by every sample."""

    def __init__(self, num_tasks: int, mode: str = "task", layer_count: int = 1):
        if num_tasks < 1:
            raise ValueError("K=0: at least one task vector is required")
        self.mode = mode
        self.num_tasks = num_tasks
        self.layer_count = layer_count if mode == "layer" else 1
        shape = (num_tasks,) if mode == "task" else (num_tasks, self.layer_count)
        self.logit = T.Tensor(np.zeros(shape), requires_grad=True)

    def parameters(self) -> list[T.Tensor]:
        return [self.logit]

    def merge_weights(self) -> MergeWeights:
        return MergeWeights(self.mode, T.softmax(self.logit.detach(), axis=0).data)

    def __call__(self, features) -> T.Tensor:
        n = T.as_tensor(features).shape[0]
        w = T.softmax(self.logit, axis=0)
        ones = np.ones((n,) + (1,) * w.ndim)
        return w * ones


def router_weights(router, features) -> np.ndarray:
    """Per-sample merge weights as a plain array."""
    return router(np.asarray(features, dtype=np.float64)).data


# ---------------------------------------------------------------------------
# losses


@dataclass
class ContrastiveBatch:
    z: T.Tensor
    partitions: Sequence[tuple[Sequence[int], Sequence[int]]]
    temperature: float = 0.5

    def __post_init__(self):
        n = self.z.shape[0]
        for i, (plus, minus) in enumerate(self.partitions):
            for j in list(plus) + list(minus):
                if not 0 <= j < n:
                    raise IndexError(f"anchor {i} references sample {j} outside a batch of {n}")


def _similarities(batch: ContrastiveBatch, i: int, idx: Sequence[int]) -> T.Tensor:
    zi = batch.z[i]
    zj = batch.z[list(idx)]
    return T.exp(T.einsum("d,md->m", zi, zj) * (1.0 / batch.temperature))


def partition_function(i: int, batch: ContrastiveBatch) -> T.Tensor:
    plus, minus = batch.partitions[i]
    if not plus and not minus:
        raise ValueError(f"anchor {i} has an empty neighborhood")
    return _similarities(batch, i, list(plus) + list(minus)).sum()


def _masks(batch: ContrastiveBatch) -> tuple[np.ndarray, np.ndarray]:
    n = batch.z.shape[0]
    plus = np.zeros((n, n))
    minus = np.zeros((n, n))
    for i, (p, m) in enumerate(batch.partitions):
        plus[i, list(p)] = 1.0
        minus[i, list(m)] = 1.0
    return plus, minus


def loss_discrepancy(batch: ContrastiveBatch) -> T.Tensor:
    """Sum over anchors of the discrepancy-aware contrastive term.

    With positives present: -log(sum_plus / Z).  Without: -log(1 - sum_minus / Z).
    Ratios are clamped to [delta, 1 - delta].  Anchors without negatives
    contribute exactly zero (their ratio is 1 and the log vanishes), as do
    anchors without neighbors.
    """
    plus, minus = _masks(batch)
    has_plus = plus.any(axis=1)
    has_minus = minus.any(axis=1)
    rows_pos = np.flatnonzero(has_plus & has_minus)
    rows_neg = np.flatnonzero(~has_plus & has_minus)
    total = T.Tensor(0.0)
    if rows_pos.size == 0 and rows_neg.size == 0:
        return total
    sim = T.exp(T.matmul(batch.z, batch.z.T) * (1.0 / batch.temperature))
    s_plus = (sim * plus).sum(axis=1)
    s_minus = (sim * minus).sum(axis=1)
    z_sum = s_plus + s_minus
    if rows_pos.size:
        ratio = s_plus[rows_pos] / z_sum[rows_pos]
        total = total - T.log(T.clip(ratio, CLAMP_DELTA, 1.0 - CLAMP_DELTA)).sum()
    if rows_neg.size:
        ratio = s_minus[rows_neg] / z_sum[rows_neg]
        total = total - T.log(1.0 - T.clip(ratio, CLAMP_DELTA, 1.0 - CLAMP_DELTA)).sum()
    return total


def loss_discrepancy_reference(batch: ContrastiveBatch) -> T.Tensor:
    """Anchor-by-anchor evaluation of the same loss."""
    total = T.Tensor(0.0)
    for i, (plus, minus) in enumerate(batch.partitions):
        if not minus:
            continue
        z_sum = partition_function(i, batch)
        if plus:
            ratio = _similarities(batch, i, plus).sum() / z_sum
            total = total - T.log(T.clip(ratio, CLAMP_DELTA, 1.0 - CLAMP_DELTA))
        else:
            ratio = _similarities(batch, i, minus).sum() / z_sum
            total = total - T.log(1.0 - T.clip(ratio, CLAMP_DELTA, 1.0 - CLAMP_DELTA))
    return total


def loss_unsup(probs) -> T.Tensor:
    """Summed Shannon entropy of per-sample probability vectors."""
    probs = T.as_tensor(probs)
    return -(probs * T.safe_log(probs, LOG_FLOOR)).sum()


def loss_bd(unsup, dis, eta: float) -> T.Tensor:
    return T.as_tensor(unsup) + T.as_tensor(dis) * eta


def bd_objective(backbone: MergedBackbone, producer, features, x, partitions, eta: float,
                 temperature: float) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """(l_unsup, l_dis, l_bd) for one batch; recorded on the active tape."""
    weights = producer(features)
    _, logits = backbone.forward(x, weights)
    probs = T.softmax(logits, axis=1)
    l_unsup = loss_unsup(probs)
    if eta and partitions is not None:
        l_dis = loss_discrepancy(ContrastiveBatch(T.l2_normalize(logits, axis=1), partitions, temperature))
    else:
        l_dis = T.Tensor(0.0)
    return l_unsup, l_dis, loss_bd(l_unsup, l_dis, eta)


# ---------------------------------------------------------------------------
# step 2: frozen adjacency structure


@dataclass
class PreparedBatch:
    indices: np.ndarray
    features: np.ndarray
    x: np.ndarray
    partitions: list[tuple[list[int], list[int]]]
    epsilon: float
    records: list


def prepare_batches(x: np.ndarray, features: np.ndarray, head: EvidentialHead | None, config: BDConfig,
                    rng: np.random.Generator) -> list[PreparedBatch]:
    """Fixed batches with adjacency, ADS and partitions computed once."""
    n = x.shape[0]
    order = rng.permutation(n)
    opinions = head.opinions(features) if head is not None else None
    batches = []
    for start in range(0, n, config.batch_size):
        idx = np.sort(order[start : start + config.batch_size])
        f = features[idx]
        partitions, eps, records = None, 0.0, []
        if opinions is not None:
            adjacency = build_adjacency(f, config.radius)
            records = compute_ads(opinions.subset(idx), adjacency, config.factors)
            eps, partitions = partition_batch(records, config.epsilon)
        batches.append(PreparedBatch(idx, f, x[idx], partitions, eps, records))
    return batches


# ---------------------------------------------------------------------------
# step 3


@dataclass
class LossTrace:
    l_unsup: list[float] = field(default_factory=list)
    l_dis: list[float] = field(default_factory=list)
    l_bd: list[float] = field(default_factory=list)

    def rows(self):
        for e, (u, d, b) in enumerate(zip(self.l_unsup, self.l_dis, self.l_bd)):
            yield e, u, d, b

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "l_unsup", "l_dis", "l_bd"])
            for e, u, d, b in self.rows():
                w.writerow([e, repr(u), repr(d), repr(b)])


def optimize_weights(backbone: MergedBackbone, producer, batches: Sequence[PreparedBatch], eta: float,
                     temperature: float, epochs: int, lr: float, rng: np.random.Generator) -> LossTrace:
    """Plain gradient descent on L_BD over the producer's parameters only."""
    trace = LossTrace()
    params = producer.parameters()
    for epoch in range(epochs):
        tot_u = tot_d = tot_b = 0.0
        for b in rng.permutation(len(batches)):
            batch = batches[b]
            with T.Tape() as tape:
                l_u, l_d, l_bd = bd_objective(backbone, producer, batch.features, batch.x, batch.partitions, eta,
                                              temperature)
            value = l_bd.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"L_BD is {value} at epoch {epoch}, batch {b}")
            T.backward(tape, l_bd)
            for p in params:
                p.data = p.data - lr * p.grad
            tot_u += l_u.item()
            tot_d += l_d.item()
            tot_b += value
        trace.l_unsup.append(tot_u)
        trace.l_dis.append(tot_d)
        trace.l_bd.append(tot_b)
        log.debug("router epoch %d L_BD %.6f", epoch, tot_b)
    return trace


def train_bd_merging(base: ParameterArchive, task_vectors: Sequence[TaskVector], aux_x: np.ndarray,
                     head: EvidentialHead | None, config: BDConfig,
                     router: RouterNet | None = None) -> tuple[RouterNet, LossTrace]:
    """Steps 2 and 3: frozen ADS partitions, then router descent on L_BD.

    ``head=None`` skips the contrastive term entirely (pure entropy routing).
    """
    if len(task_vectors) == 0:
        raise ValueError("K=0: at least one task vector is required")
    rng_init = np.random.default_rng([config.seed, 1])
    rng_batch = np.random.default_rng([config.seed, 2])
    rng_train = np.random.default_rng([config.seed, 3])
    backbone = MergedBackbone(base, task_vectors)
    features = pooled_features(base, aux_x)
    if router is None:
        router = RouterNet(features.shape[1], len(task_vectors), config.router_hidden, config.mode,
                           backbone.layer_count, rng_init)
    batches = prepare_batches(aux_x, features, head if config.eta else None, config, rng_batch)
    trace = optimize_weights(backbone, router, batches, config.eta, config.temperature, config.epochs, config.lr,
                             rng_train)
    return router, trace


def train_static_weights(base: ParameterArchive, task_vectors: Sequence[TaskVector], aux_x: np.ndarray,
                         config: BDConfig) -> tuple[StaticWeights, LossTrace]:
    """One global weight vector fitted on the entropy objective alone."""
    rng_batch = np.random.default_rng([config.seed, 2])
    rng_train = np.random.default_rng([config.seed, 3])
    backbone = MergedBackbone(base, task_vectors)
    static = StaticWeights(len(task_vectors), config.mode, backbone.layer_count)
    features = pooled_features(base, aux_x)
    batches = prepare_batches(aux_x, features, None, config, rng_batch)
    trace = optimize_weights(backbone, static, batches, 0.0, config.temperature, config.epochs, config.lr, rng_train)
    return static, trace


def routed_logits(base: ParameterArchive, task_vectors: Sequence[TaskVector], producer, x: np.ndarray) -> np.ndarray:
    """Evaluation-time forward: each sample is merged with its own weights."""
    x = np.asarray(x, dtype=np.float64)
    backbone = MergedBackbone(base, task_vectors)
    weights = producer(pooled_features(base, x))
    return backbone.forward(x, weights)[1].data


def materialized_logits(base: ParameterArchive, task_vectors: Sequence[TaskVector], weights: np.ndarray,
                        x: np.ndarray) -> np.ndarray:
    """Reference path: build one merged archive per sample, then forward it."""
    from .network import forward_numpy

    mode = "task" if weights.ndim == 2 else "layer"
    rows = []
    for i in range(x.shape[0]):
        merged = merge_parameters(base, task_vectors, MergeWeights(mode, weights[i]))
        rows.append(forward_numpy(merged, x[i : i + 1])[1][0])
    return np.array(rows)
