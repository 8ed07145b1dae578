"""Dense classifier backbone stored as a ParameterArchive.

Layer ``l`` owns ``layer{l}.weight`` (in x out) and ``layer{l}.bias`` with
layer_index ``l``; the last layer is the classifier over the unified label
space and carries the highest index.  Hidden layers use tanh.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .params import ParameterArchive, TaskVector


@dataclass(frozen=True)
class MLPSpec:
    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def feature_dim(self) -> int:
        """Width of the pooled (last hidden) representation."""
        return self.sizes[-2]

    @property
    def num_outputs(self) -> int:
        return self.sizes[-1]


def weight_name(layer: int) -> str:
    return f"layer{layer}.weight"


def bias_name(layer: int) -> str:
    return f"layer{layer}.bias"


def init_archive(spec: MLPSpec, rng: np.random.Generator, metadata=None) -> ParameterArchive:
    params = {}
    for l in range(spec.num_layers):
        fan_in, fan_out = spec.sizes[l], spec.sizes[l + 1]
        params[weight_name(l)] = (l, rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        params[bias_name(l)] = (l, np.zeros(fan_out))
    meta = {"role": "model", "sizes": ",".join(map(str, spec.sizes))}
    meta.update(metadata or {})
    return ParameterArchive.from_dict(params, meta)


def spec_of(archive: ParameterArchive) -> MLPSpec:
    layers = archive.layer_count
    sizes = [archive[weight_name(0)].shape[0]] + [archive[weight_name(l)].shape[1] for l in range(layers)]
    return MLPSpec(tuple(sizes))


def forward(params, x, spec: MLPSpec):
    """Return (pooled features, logits).  ``params`` maps names to Tensors or arrays."""
    h = T.as_tensor(x)
    for l in range(spec.num_layers):
        h_in = h
        h = T.linear_forward(h, params[weight_name(l)], params[bias_name(l)])
        if l < spec.num_layers - 1:
            h = T.tanh(h)
    return h_in, h


def forward_numpy(archive: ParameterArchive, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    spec = spec_of(archive)
    feats, logits = forward(archive, np.asarray(x, dtype=np.float64), spec)
    return feats.data, logits.data


def predict(archive: ParameterArchive, x: np.ndarray) -> np.ndarray:
    return forward_numpy(archive, x)[1].argmax(axis=1)


def pooled_features(archive: ParameterArchive, x: np.ndarray) -> np.ndarray:
    return forward_numpy(archive, x)[0]


class MergedBackbone:
    """Frozen base + task vectors evaluated with per-sample merge weights.

    The forward pass never materializes a merged archive: for layer l,
    h @ (W0 + sum_k w_k tau_k) is computed as h @ W0 + sum_k w_k (h @ tau_k).
    """

    def __init__(self, base: ParameterArchive, vectors: Sequence[TaskVector]):
        if len(vectors) == 0:
            raise ValueError("K=0: at least one task vector is required")
        self.spec = spec_of(base)
        self.base = base
        self.k = len(vectors)
        self.tau_w = [np.stack([v[weight_name(l)] for v in vectors]) for l in range(self.spec.num_layers)]
        self.tau_b = [np.stack([v[bias_name(l)] for v in vectors]) for l in range(self.spec.num_layers)]

    @property
    def layer_count(self) -> int:
        return self.spec.num_layers

    def forward(self, x, weights):
        """``weights``: Tensor (N, K) task-wise or (N, K, layer_count) layer-wise.

        Returns (pooled features, logits) of the per-sample merged models.
        """
        weights = T.as_tensor(weights)
        h = T.as_tensor(x)
        for l in range(self.spec.num_layers):
            w_l = weights if weights.ndim == 2 else weights[:, :, l]
            base_out = T.linear_forward(h, self.base[weight_name(l)], self.base[bias_name(l)])
            per_task = T.einsum("ni,kio->nko", h, self.tau_w[l]) + self.tau_b[l]
            h_in = h
            h = base_out + T.einsum("nk,nko->no", w_l, per_task)
            if l < self.spec.num_layers - 1:
                h = T.tanh(h)
        return h_in, h
