"""Dirichlet evidential head over the unified label space.

Opinions follow subjective logic: alpha = e + 1, S = sum(alpha),
belief b = e / S, uncertainty u = L / S, probability p = alpha / S.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import tensor as T
from .params import ParameterArchive

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class DirichletOpinion:
    """Batch of opinions; every field has a leading sample axis."""

    evidence: np.ndarray
    alpha: np.ndarray
    strength: np.ndarray
    belief: np.ndarray
    uncertainty: np.ndarray
    probability: np.ndarray

    @property
    def num_labels(self) -> int:
        return self.alpha.shape[-1]

    def __len__(self) -> int:
        return self.alpha.shape[0]

    def subset(self, idx) -> "DirichletOpinion":
        return DirichletOpinion(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def evidence_to_opinion(evidence, num_labels: int | None = None) -> DirichletOpinion:
    e = np.atleast_2d(np.asarray(evidence, dtype=np.float64))
    if num_labels is not None and e.shape[-1] != num_labels:
        raise ValueError(f"evidence has {e.shape[-1]} classes, expected {num_labels}")
    if np.any(e < 0):
        raise ValueError("evidence must be non-negative")
    L = e.shape[-1]
    alpha = e + 1.0
    S = alpha.sum(axis=-1)
    return DirichletOpinion(
        evidence=e,
        alpha=alpha,
        strength=S,
        belief=e / S[:, None],
        uncertainty=L / S,
        probability=alpha / S[:, None],
    )


@dataclass
class HeadConfig:
    num_labels: int
    lam: float = 0.1
    gamma: float = 0.1
    iec_clip: bool = True
    entropy_sign: str = "as-written"
    iec_gradient: bool = False

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValueError("the unified label set needs at least 2 labels")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be non-negative")
        if self.entropy_sign not in ("as-written", "minimize-entropy"):
            raise ValueError(f"unknown entropy_sign {self.entropy_sign!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.entropy_sign == "as-written" else -1.0


def _top_two(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    part = np.sort(alpha, axis=-1)
    return part[..., -1], part[..., -2]


def iec_score(opinion: DirichletOpinion, clip: bool = True) -> np.ndarray:
    """Inter-class evidential contrast per sample.

    nu = (S / a1) * (L / S) * (a2 / a1) with a1 >= a2 the two largest alphas.
    """
    a1, a2 = _top_two(opinion.alpha)
    L = opinion.num_labels
    nu = (opinion.strength / a1) * (L / opinion.strength) * (a2 / a1)
    return np.clip(nu, 0.0, 1.0) if clip else nu


def _iec_tensor(alpha: T.Tensor, clip: bool) -> T.Tensor:
    order = np.argsort(alpha.data, axis=-1, kind="stable")
    rows = np.arange(alpha.shape[0])
    a1 = alpha[rows, order[:, -1]]
    a2 = alpha[rows, order[:, -2]]
    S = alpha.sum(axis=-1)
    nu = (S / a1) * (alpha.shape[-1] / S) * (a2 / a1)
    return T.clip(nu, 0.0, 1.0) if clip else nu


def loss_inverse(nu, u) -> T.Tensor:
    """-sum_i [nu_i log(1 - u_i) + (1 - nu_i) log u_i]."""
    nu, u = T.as_tensor(nu), T.as_tensor(u)
    term = nu * T.safe_log(1.0 - u, LOG_FLOOR) + (1.0 - nu) * T.safe_log(u, LOG_FLOOR)
    return -term.sum()


def kl_dirichlet_uniform(alpha) -> T.Tensor:
    """KL(Dir(alpha) || Dir(1)) along the last axis."""
    alpha = T.as_tensor(alpha)
    L = alpha.shape[-1]
    S = alpha.sum(axis=-1, keepdims=True)
    first = T.lgamma(S).sum(axis=-1) - T.lgamma(alpha).sum(axis=-1) - math.lgamma(L)
    second = ((alpha - 1.0) * (T.digamma(alpha) - T.digamma(S))).sum(axis=-1)
    return first + second


def kl_dirichlet_uniform_reference(alpha) -> np.ndarray:
    """Plain scipy evaluation of the same KL, independent of the tape."""
    a = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    S = a.sum(-1)
    L = a.shape[-1]
    return (
        special.gammaln(S)
        - special.gammaln(a).sum(-1)
        - special.gammaln(L)
        + ((a - 1) * (special.digamma(a) - special.digamma(S)[:, None])).sum(-1)
    )


def loss_entropy_kl(alpha, lam: float, sign: float = 1.0) -> T.Tensor:
    """sum_i [sign * sum_j p_ij log p_ij + lam * KL(Dir(alpha_i) || Dir(1))]."""
    alpha = T.as_tensor(alpha)
    S = alpha.sum(axis=-1, keepdims=True)
    p = alpha / S
    neg_entropy = (p * T.safe_log(p, LOG_FLOOR)).sum(axis=-1)
    per_sample = neg_entropy * sign
    if lam:
        per_sample = per_sample + kl_dirichlet_uniform(alpha) * lam
    return per_sample.sum()


def loss_head(evidence, config: HeadConfig, parts: dict | None = None) -> T.Tensor:
    """L_Ent + gamma * L_Inv for a batch of evidence vectors (N, L)."""
    evidence = T.as_tensor(evidence)
    alpha = evidence + 1.0
    S = alpha.sum(axis=-1)
    u = config.num_labels / S
    nu = _iec_tensor(alpha, config.iec_clip)
    if not config.iec_gradient:
        nu = nu.detach()
    l_ent = loss_entropy_kl(alpha, config.lam, config.sign)
    l_inv = loss_inverse(nu, u)
    if parts is not None:
        parts["l_ent"] = l_ent.item()
        parts["l_inv"] = l_inv.item()
    return l_ent + l_inv * config.gamma


# ---------------------------------------------------------------------------
# the head


@dataclass
class EvidentialHead:
    """Linear map from pooled features to L evidences through softplus."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def from_classifier(cls, archive: ParameterArchive) -> "EvidentialHead":
        """Start from the pretrained model's output layer."""
        last = archive.layer_count - 1
        return cls(archive[f"layer{last}.weight"].copy(), archive[f"layer{last}.bias"].copy())

    @classmethod
    def random(cls, feature_dim: int, num_labels: int, rng: np.random.Generator) -> "EvidentialHead":
        return cls(rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (feature_dim, num_labels)), np.zeros(num_labels))

    @property
    def num_labels(self) -> int:
        return self.weight.shape[1]

    def evidence(self, features, weight=None, bias=None) -> T.Tensor:
        w = self.weight if weight is None else weight
        b = self.bias if bias is None else bias
        return T.softplus(T.linear_forward(features, w, b))

    def opinions(self, features: np.ndarray) -> DirichletOpinion:
        return evidence_to_opinion(self.evidence(np.asarray(features, dtype=np.float64)).data)

    def to_archive(self, metadata=None) -> ParameterArchive:
        meta = {"role": "evidential_head"}
        meta.update(metadata or {})
        return ParameterArchive.from_dict({"head.weight": (0, self.weight), "head.bias": (0, self.bias)}, meta)

    @classmethod
    def from_archive(cls, archive: ParameterArchive) -> "EvidentialHead":
        if archive.metadata.get("role") != "evidential_head":
            raise ValueError("archive is not an evidential head (metadata role mismatch)")
        return cls(archive["head.weight"].copy(), archive["head.bias"].copy())


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class HeadTrace:
    loss: list[float] = field(default_factory=list)
    l_ent: list[float] = field(default_factory=list)
    l_inv: list[float] = field(default_factory=list)


def train_head(
    backbone: ParameterArchive,
    head: EvidentialHead,
    data: np.ndarray,
    config: HeadConfig,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    rng: np.random.Generator | None = None,
) -> tuple[EvidentialHead, HeadTrace]:
    """Gradient descent on L_Head over unlabeled inputs; the backbone stays frozen.

    ``data`` holds raw inputs; pooled features come from the backbone once.
    """
    from .network import pooled_features

    trace = HeadTrace()
    if epochs <= 0:
        return head, trace
    if head.num_labels != config.num_labels:
        raise ValueError(f"head emits {head.num_labels} evidences, config expects {config.num_labels}")
    rng = rng or np.random.default_rng(0)
    feats = pooled_features(backbone, data)
    weight = T.Tensor(head.weight, requires_grad=True)
    bias = T.Tensor(head.bias, requires_grad=True)
    n = feats.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = ent = inv = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            parts: dict = {}
            with T.Tape() as tape:
                loss = loss_head(head.evidence(feats[idx], weight, bias), config, parts)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"head loss is {loss.item()} at epoch {epoch}, batch {b}")
            T.backward(tape, loss)
            weight.data = weight.data - lr * weight.grad
            bias.data = bias.data - lr * bias.grad
            total += loss.item()
            ent += parts["l_ent"]
            inv += parts["l_inv"]
        trace.loss.append(total)
        trace.l_ent.append(ent)
        trace.l_inv.append(inv)
        log.debug("head epoch %d loss %.6f", epoch, total)
    return EvidentialHead(weight.data.copy(), bias.data.copy()), trace
