"""Radius neighborhoods in feature space and the adjacency discrepancy score.

For anchor i and neighbor k the score is

    d_ik = sharp(i) * div(i) * conf(i, k)

where sharp averages log(S_j / max_c alpha_jc - 1) over the anchor and its
neighbors, div averages the L1 distance between the anchor's expected
probabilities and each neighbor's, and conf is the confidence-weighted L1
distance between the anchor's and neighbor k's probabilities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evidential import LOG_FLOOR, DirichletOpinion


@dataclass(frozen=True)
class AdjacencySet:
    anchor: int
    neighbors: tuple[int, ...]
    radius: float

    @property
    def members(self) -> tuple[int, ...]:
        """The anchor followed by its neighbors."""
        return (self.anchor,) + self.neighbors


@dataclass(frozen=True)
class RadiusPolicy:
    """``fixed`` uses ``radius``; ``percentile`` picks r per batch so the mean
    neighborhood size is about ``target_size``."""

    kind: str = "percentile"
    radius: float = 1.0
    target_size: float = 10.0

    def __post_init__(self):
        if self.kind not in ("fixed", "percentile"):
            raise ValueError(f"unknown radius policy {self.kind!r}")

    def resolve(self, dist: np.ndarray) -> float:
        if self.kind == "fixed":
            return float(self.radius)
        n = dist.shape[0]
        if n <= 1:
            return 0.0
        off = dist[~np.eye(n, dtype=bool)]
        q = min(1.0, self.target_size / (n - 1))
        return float(np.quantile(off, q))


@dataclass(frozen=True)
class EpsilonPolicy:
    """``median`` thresholds at the batch median of all d_ik; ``fixed`` uses ``value``."""

    kind: str = "median"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "median"):
            raise ValueError(f"unknown epsilon policy {self.kind!r}")

    def resolve(self, scores: np.ndarray) -> float:
        if self.kind == "fixed" or scores.size == 0:
            return float(self.value)
        return float(np.median(scores))


@dataclass(frozen=True)
class ADSFactors:
    """Which factors enter the product; a disabled factor is replaced by 1."""

    sharp: bool = True
    div: bool = True
    conf: bool = True
    enabled: bool = True


@dataclass(frozen=True)
class DiscrepancyRecord:
    anchor: int
    neighbor: int
    sharp: float
    div: float
    conf: float
    ads: float


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def build_adjacency(features: np.ndarray, policy: RadiusPolicy | float = RadiusPolicy()) -> list[AdjacencySet]:
    if not isinstance(policy, RadiusPolicy):
        policy = RadiusPolicy("fixed", float(policy))
    dist = pairwise_distances(features)
    r = policy.resolve(dist)
    n = dist.shape[0]
    sets = []
    for i in range(n):
        nbrs = tuple(int(j) for j in np.flatnonzero(dist[i] <= r) if j != i)
        sets.append(AdjacencySet(i, nbrs, r))
    return sets


def sharpness(adjacency: AdjacencySet, opinions: DirichletOpinion) -> float:
    idx = list(adjacency.members)
    S = opinions.strength[idx]
    amax = opinions.alpha[idx].max(axis=-1)
    return float(np.mean(np.log(np.maximum(S / amax - 1.0, LOG_FLOOR))))


def divergence(adjacency: AdjacencySet, opinions: DirichletOpinion) -> float:
    if not adjacency.neighbors:
        return 0.0
    p = opinions.probability
    i = adjacency.anchor
    nb = list(adjacency.neighbors)
    return float(np.mean(np.abs(p[i][None, :] - p[nb]).sum(-1)))


def conflict(opinions: DirichletOpinion, i: int, k: int) -> float:
    p, u = opinions.probability, opinions.uncertainty
    return float(np.abs(p[i] - p[k]).sum() * (1.0 - u[i]) * (1.0 - u[k]))


def ads(i: int, k: int, opinions: DirichletOpinion, adjacency: Sequence[AdjacencySet], factors=ADSFactors()):
    """Score one anchor/neighbor pair."""
    aset = adjacency[i]
    if k not in aset.neighbors:
        raise ValueError(f"sample {k} is not a neighbor of anchor {i}")
    s = sharpness(aset, opinions) if factors.sharp else 1.0
    d = divergence(aset, opinions) if factors.div else 1.0
    c = conflict(opinions, i, k) if factors.conf else 1.0
    score = s * d * c if factors.enabled else 0.0
    return DiscrepancyRecord(i, k, s, d, c, score)


def compute_ads(
    opinions: DirichletOpinion, adjacency: Sequence[AdjacencySet], factors: ADSFactors = ADSFactors()
) -> list[list[DiscrepancyRecord]]:
    """Records for every anchor, vectorized over each anchor's neighbors."""
    p, u, alpha, S = opinions.probability, opinions.uncertainty, opinions.alpha, opinions.strength
    log_sharp = np.log(np.maximum(S / alpha.max(axis=-1) - 1.0, LOG_FLOOR))
    out = []
    for aset in adjacency:
        i = aset.anchor
        nb = np.asarray(aset.neighbors, dtype=np.int64)
        if nb.size == 0:
            out.append([])
            continue
        sharp = float(np.mean(log_sharp[list(aset.members)])) if factors.sharp else 1.0
        l1 = np.abs(p[i][None, :] - p[nb]).sum(-1)
        div = float(np.mean(l1)) if factors.div else 1.0
        conf = l1 * (1.0 - u[i]) * (1.0 - u[nb]) if factors.conf else np.ones(nb.size)
        scores = sharp * div * conf if factors.enabled else np.zeros(nb.size)
        out.append(
            [DiscrepancyRecord(i, int(k), sharp, div, float(c), float(d)) for k, c, d in zip(nb, conf, scores)]
        )
    return out


def partition_neighbors(records: Sequence[DiscrepancyRecord], eps: float) -> tuple[list[int], list[int]]:
    """Split neighbors into positives (d < eps) and negatives (d >= eps)."""
    plus = [r.neighbor for r in records if r.ads < eps]
    minus = [r.neighbor for r in records if not r.ads < eps]
    return plus, minus


def partition_batch(
    records: Sequence[Sequence[DiscrepancyRecord]], policy: EpsilonPolicy = EpsilonPolicy()
) -> tuple[float, list[tuple[list[int], list[int]]]]:
    scores = np.array([r.ads for recs in records for r in recs])
    eps = policy.resolve(scores)
    return eps, [partition_neighbors(recs, eps) for recs in records]


def write_ads_csv(path, batches, append: bool = False) -> None:
    """Diagnostic dump of ``(records, eps, index_map)`` batches.

    ``index_map`` translates in-batch positions to dataset indices.
    """
    path = Path(path)
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["anchor", "neighbor", "sharp", "div", "conf", "ads", "partition"])
        for records, eps, index_map in batches:
            for recs in records:
                for r in recs:
                    part = "plus" if r.ads < eps else "minus"
                    w.writerow(
                        [int(index_map[r.anchor]), int(index_map[r.neighbor]),
                         repr(r.sharp), repr(r.div), repr(r.conf), repr(r.ads), part]
                    )
