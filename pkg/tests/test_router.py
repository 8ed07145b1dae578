import math

import numpy as np
import pytest

from evimerge import tensor as T
from evimerge.adjacency import EpsilonPolicy, RadiusPolicy
from evimerge.evidential import EvidentialHead
from evimerge.network import MergedBackbone, MLPSpec, init_archive, pooled_features
from evimerge.params import canonicalize_against, compute_task_vector
from evimerge.router import (
    CLAMP_DELTA,
    BDConfig,
    ContrastiveBatch,
    RouterNet,
    StaticWeights,
    bd_objective,
    loss_bd,
    loss_discrepancy,
    loss_discrepancy_reference,
    loss_unsup,
    materialized_logits,
    partition_function,
    prepare_batches,
    routed_logits,
    router_weights,
    train_bd_merging,
)

from . import oracles

SPEC = MLPSpec((4, 6, 5, 3))


def family(k=3, seed=0):
    rng = np.random.default_rng(seed)
    base = init_archive(SPEC, rng)
    vecs = []
    for _ in range(k):
        ft = base.with_values([e.values + 0.3 * rng.normal(size=e.shape) for e in base])
        vecs.append(compute_task_vector(base, canonicalize_against(base, ft)))
    return base, vecs


def cb(z, partitions, tau=1.0):
    return ContrastiveBatch(T.Tensor(np.asarray(z, dtype=float)), partitions, tau)


def test_untrained_router_is_uniform():
    r = RouterNet(5, 4, rng=np.random.default_rng(0))
    w = router_weights(r, np.random.default_rng(1).normal(size=(7, 5)))
    np.testing.assert_allclose(w, 0.25, atol=1e-15)


def test_layer_mode_shape():
    r = RouterNet(5, 2, mode="layer", layer_count=3)
    w = router_weights(r, np.ones((4, 5)))
    assert w.shape == (4, 2, 3)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_softmax_extreme_logits():
    r = RouterNet(1, 2, hidden=1)
    r.b2.data = np.array([800.0, 0.0])
    np.testing.assert_allclose(router_weights(r, np.zeros((1, 1))), [[1.0, 0.0]])


def test_router_rejects_zero_tasks():
    with pytest.raises(ValueError, match="K=0"):
        RouterNet(3, 0)
    base, _ = family(1)
    with pytest.raises(ValueError, match="K=0"):
        train_bd_merging(base, [], np.zeros((4, 4)), None, BDConfig())


def test_router_rejects_wrong_feature_width():
    with pytest.raises(T.DimensionError, match="width 5"):
        RouterNet(5, 2)(np.ones((2, 4)))


def test_partition_function_hand_values():
    batch = cb([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]], [([1], [2]), ([], []), ([], []), ([], [])])
    assert partition_function(0, batch).item() == pytest.approx(2.0)
    batch = cb([[1.0, 0.0], [1.0, 0.0]], [([1], []), ([], [])])
    assert partition_function(0, batch).item() == pytest.approx(math.e)
    with pytest.raises(ValueError, match="empty"):
        partition_function(1, batch)


def test_discrepancy_loss_hand_values():
    z = [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
    assert loss_discrepancy(cb(z, [([1], [2]), ([], []), ([], [])])).item() == pytest.approx(math.log(2), abs=1e-12)
    # positive orthogonal, negative parallel, low temperature: ratio below delta
    z = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
    val = loss_discrepancy(cb(z, [([1], [2]), ([], []), ([], [])], tau=0.01)).item()
    assert val == pytest.approx(-math.log(CLAMP_DELTA), abs=1e-6)
    assert val == pytest.approx(13.8155, abs=1e-4)


def test_anchor_without_negatives_contributes_zero():
    z = [[1.0, 0.0], [0.3, 0.7], [0.5, 0.5]]
    assert loss_discrepancy(cb(z, [([1, 2], []), ([0], []), ([], [])])).item() == 0.0


def test_partitions_out_of_range():
    with pytest.raises(IndexError):
        cb([[1.0, 0.0]], [([3], [])])


def random_batch(rng, n=10, d=4, tau=0.5):
    z = rng.normal(size=(n, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    parts = []
    for i in range(n):
        others = [j for j in range(n) if j != i and rng.random() < 0.5]
        split = rng.random(len(others)) < 0.5
        parts.append(([j for j, s in zip(others, split) if s], [j for j, s in zip(others, split) if not s]))
    return z, parts, tau


def test_vectorized_matches_anchor_loop_and_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        z, parts, tau = random_batch(rng)
        fast = loss_discrepancy(cb(z, parts, tau)).item()
        assert fast == pytest.approx(loss_discrepancy_reference(cb(z, parts, tau)).item(), rel=1e-12)
        ref = sum(oracles.contrastive_anchor(z.tolist(), i, p, m, tau) for i, (p, m) in enumerate(parts))
        assert fast == pytest.approx(ref, rel=1e-10)


def test_discrepancy_loss_invariant_to_batch_reordering():
    rng = np.random.default_rng(5)
    z, parts, tau = random_batch(rng)
    perm = rng.permutation(len(z))
    inv = np.argsort(perm)
    z2 = z[perm]
    parts2 = [([int(inv[j]) for j in parts[perm[i]][0]], [int(inv[j]) for j in parts[perm[i]][1]])
              for i in range(len(z))]
    a = loss_discrepancy(cb(z, parts, tau)).item()
    assert loss_discrepancy(cb(z2, parts2, tau)).item() == pytest.approx(a, rel=1e-12)


@pytest.mark.parametrize("p, expected", [([[1.0, 0.0]], 0.0), ([[0.25] * 4], math.log(4)), ([[0.5, 0.5]], math.log(2))])
def test_unsup_loss_hand_values(p, expected):
    assert loss_unsup(np.array(p)).item() == pytest.approx(expected, abs=1e-9)


def test_bd_loss_composition():
    assert loss_bd(1.0, 2.0, 0.1).item() == pytest.approx(1.2)


def merged_lists(base, vecs, w):
    """Merge with explicit per-layer weights using Python floats."""
    out = {}
    for name in base.names:
        layer = int(name[len("layer"):].split(".")[0])
        wl = [w[k][layer] if isinstance(w[k], list) else w[k] for k in range(len(vecs))]
        arr = base[name] + sum(wl[k] * vecs[k][name] for k in range(len(vecs)))
        out[name] = arr.tolist()
    return out


@pytest.mark.parametrize("mode", ["task", "layer"])
def test_per_sample_forward_matches_merge_then_forward(mode):
    base, vecs = family()
    rng = np.random.default_rng(9)
    for n in (1, 3, 8):
        x = rng.normal(size=(n, 4))
        if mode == "task":
            w = rng.dirichlet(np.ones(3), size=n)
        else:
            w = np.moveaxis(rng.dirichlet(np.ones(3), size=(n, SPEC.num_layers)), -1, 1)
        fast = MergedBackbone(base, vecs).forward(x, w)[1].data
        for i in range(n):
            ref = oracles.mlp_forward(merged_lists(base, vecs, w[i].tolist()), x[i].tolist())
            assert np.max(np.abs(fast[i] - np.array(ref))) <= 1e-10
        np.testing.assert_allclose(fast, materialized_logits(base, vecs, w, x), atol=1e-12)


def test_router_gradient_matches_finite_differences():
    base, vecs = family()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8, 4))
    feats = pooled_features(base, x)
    head = EvidentialHead.random(feats.shape[1], 3, rng)
    cfg = BDConfig(radius=RadiusPolicy(target_size=3), batch_size=8)
    (batch,) = prepare_batches(x, feats, head, cfg, np.random.default_rng(0))
    router = RouterNet(feats.shape[1], 3, hidden=5, mode="layer", layer_count=SPEC.num_layers, rng=rng)
    router.w2.data = rng.normal(size=router.w2.shape)
    backbone = MergedBackbone(base, vecs)

    for slot, p in enumerate(router.parameters()):
        def loss(v, slot=slot):
            params = router.parameters()
            params[slot] = v
            return _objective_with(router, params, backbone, feats, x, batch.partitions)

        assert T.finite_diff_check(loss, p.data.copy()) < 1e-5

    assert any(m for _, m in batch.partitions)
    with T.Tape() as tape:
        total = bd_objective(backbone, router, feats, x, batch.partitions, 0.1, 0.5)[2]
    T.backward(tape, total)
    for slot, p in enumerate(router.parameters()):
        def loss(v, slot=slot):
            params = [q.data for q in router.parameters()]
            params[slot] = v
            return _objective_with(router, params, backbone, feats, x, batch.partitions)

        np.testing.assert_allclose(p.grad, T.gradient(loss, p.data.copy()), rtol=1e-10, atol=1e-12)


def _objective_with(router, params, backbone, feats, x, partitions):
    w1, b1, w2, b2 = params
    hidden = T.tanh(T.linear_forward(feats, w1, b1))
    z = T.linear_forward(hidden, w2, b2)
    weights = T.softmax(z.reshape(z.shape[0], router.num_tasks, router.layer_count), axis=1)
    return bd_objective(backbone, lambda _: weights, feats, x, partitions, 0.1, 0.5)[2]


def test_zero_epochs_keeps_uniform_weights():
    base, vecs = family()
    x = np.random.default_rng(0).normal(size=(20, 4))
    router, trace = train_bd_merging(base, vecs, x, None, BDConfig(epochs=0))
    np.testing.assert_allclose(router_weights(router, pooled_features(base, x)), 1 / 3, atol=1e-15)
    assert trace.l_bd == []


def test_single_task_routing_is_constant():
    base, vecs = family(1)
    x = np.random.default_rng(0).normal(size=(20, 4))
    router, _ = train_bd_merging(base, vecs, x, None, BDConfig(epochs=3))
    np.testing.assert_array_equal(router_weights(router, pooled_features(base, x)), 1.0)


def test_training_decreases_objective_and_is_deterministic(tmp_path):
    base, vecs = family()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(48, 4))
    head = EvidentialHead.random(SPEC.feature_dim, 3, rng)
    cfg = BDConfig(epochs=15, batch_size=16, lr=0.05, radius=RadiusPolicy(target_size=4),
                   epsilon=EpsilonPolicy())
    r1, t1 = train_bd_merging(base, vecs, x, head, cfg)
    r2, t2 = train_bd_merging(base, vecs, x, head, cfg)
    assert t1.l_bd[-1] < t1.l_bd[0]
    assert t1.l_bd == t2.l_bd
    assert r1.to_archive().bitwise_equal(r2.to_archive())
    t1.write_csv(tmp_path / "trace.csv")
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "epoch,l_unsup,l_dis,l_bd"


def test_router_archive_round_trip():
    r = RouterNet(5, 3, mode="layer", layer_count=2, rng=np.random.default_rng(1))
    r.w2.data = np.random.default_rng(2).normal(size=r.w2.shape)
    back = RouterNet.from_archive(r.to_archive())
    x = np.random.default_rng(3).normal(size=(4, 5))
    np.testing.assert_array_equal(router_weights(back, x), router_weights(r, x))
    with pytest.raises(ValueError, match="role"):
        RouterNet.from_archive(init_archive(SPEC, np.random.default_rng(0)))


def test_static_weights_broadcast_and_routed_logits():
    base, vecs = family()
    s = StaticWeights(3, "task")
    x = np.random.default_rng(0).normal(size=(5, 4))
    w = router_weights(s, pooled_features(base, x))
    assert w.shape == (5, 3)
    np.testing.assert_allclose(routed_logits(base, vecs, s, x), materialized_logits(base, vecs, w, x), atol=1e-12)
    assert s.merge_weights().mode == "task"
