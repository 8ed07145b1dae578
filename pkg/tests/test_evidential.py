import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evimerge import tensor as T
from evimerge.evidential import (
    EvidentialHead,
    HeadConfig,
    TrainingDiverged,
    evidence_to_opinion,
    iec_score,
    kl_dirichlet_uniform,
    kl_dirichlet_uniform_reference,
    loss_entropy_kl,
    loss_head,
    loss_inverse,
    train_head,
)
from evimerge.network import MLPSpec, init_archive
from evimerge.params import to_bytes


def opinion_of_alpha(alpha):
    return evidence_to_opinion(np.asarray(alpha, dtype=float) - 1.0)


def test_zero_evidence():
    o = evidence_to_opinion([0.0, 0.0, 0.0], 3)
    assert o.alpha.tolist() == [[1.0, 1.0, 1.0]]
    assert o.strength[0] == 3.0
    assert o.uncertainty[0] == 1.0
    np.testing.assert_allclose(o.probability, [[1 / 3] * 3])
    assert not o.belief.any()


def test_two_class_hand_values():
    o = evidence_to_opinion([3.0, 1.0], 2)
    np.testing.assert_allclose(o.alpha, [[4.0, 2.0]])
    assert o.strength[0] == 6.0
    np.testing.assert_allclose(o.belief, [[0.5, 1 / 6]], atol=1e-12)
    assert o.uncertainty[0] == pytest.approx(1 / 3)
    np.testing.assert_allclose(o.probability, [[2 / 3, 1 / 3]], atol=1e-12)


def test_three_class_hand_values():
    o = evidence_to_opinion([9.0, 0.0, 0.0], 3)
    assert o.strength[0] == 12.0
    np.testing.assert_allclose(o.belief, [[0.75, 0, 0]])
    assert o.uncertainty[0] == 0.25
    np.testing.assert_allclose(o.probability, [[10 / 12, 1 / 12, 1 / 12]])


def test_negative_evidence_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        evidence_to_opinion([1.0, -0.1])


def test_label_count_mismatch():
    with pytest.raises(ValueError):
        evidence_to_opinion([1.0, 2.0], 3)


@pytest.mark.parametrize(
    "alpha, clip, expected",
    [((4, 2), True, 0.25), ((10, 1, 1), True, 0.03), ((1, 1), False, 2.0), ((1, 1), True, 1.0)],
)
def test_iec_hand_values(alpha, clip, expected):
    assert iec_score(opinion_of_alpha([alpha]), clip)[0] == pytest.approx(expected, abs=1e-12)


def test_iec_ignores_non_top_two_classes():
    a = opinion_of_alpha([[7.0, 3.0, 1.5, 2.0, 1.0]])
    b = opinion_of_alpha([[7.0, 3.0, 2.0, 1.0, 1.5]])
    # S is unchanged by the permutation, so nu must match exactly
    assert iec_score(a)[0] == iec_score(b)[0]


@pytest.mark.parametrize("nu, u, expected", [(1.0, 1e-15, 0.0), (0.0, 1.0, 0.0), (0.5, 0.5, math.log(2))])
def test_loss_inverse_hand_values(nu, u, expected):
    assert loss_inverse([nu], [u]).item() == pytest.approx(expected, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(1e-9, 1))
def test_loss_inverse_nonnegative(nu, u):
    assert loss_inverse([nu], [u]).item() >= 0.0


def test_kl_hand_values():
    assert kl_dirichlet_uniform(np.ones((1, 5))).item() == pytest.approx(0.0, abs=1e-12)
    assert kl_dirichlet_uniform(np.array([[2.0, 1.0]])).item() == pytest.approx(0.1931, abs=1e-4)


def test_kl_matches_reference_and_is_nonnegative():
    rng = np.random.default_rng(0)
    alpha = rng.uniform(1, 20, size=(100, 6))
    ours = kl_dirichlet_uniform(alpha).data
    np.testing.assert_allclose(ours, kl_dirichlet_uniform_reference(alpha), rtol=1e-12, atol=1e-12)
    assert np.all(ours >= 0)


def test_entropy_term_hand_values():
    assert loss_entropy_kl(np.ones((1, 4)), 0.1).item() == pytest.approx(-math.log(4), abs=1e-4)
    alpha = np.array([[999.0, 1.0]])
    neg_ent = loss_entropy_kl(alpha, 0.0).item()
    assert neg_ent == pytest.approx(-0.0079, abs=1e-4)
    with_kl = loss_entropy_kl(alpha, 0.1).item()
    assert with_kl == pytest.approx(neg_ent + 0.1 * kl_dirichlet_uniform_reference(alpha)[0], rel=1e-12)


def test_entropy_sign_flip():
    alpha = np.array([[3.0, 1.5, 1.0]])
    assert loss_entropy_kl(alpha, 0.0, -1.0).item() == pytest.approx(-loss_entropy_kl(alpha, 0.0, 1.0).item())


def test_loss_head_composition():
    rng = np.random.default_rng(1)
    ev = rng.uniform(0, 4, size=(6, 3))
    parts = {}
    cfg = HeadConfig(3, lam=0.1, gamma=1.0)
    total = loss_head(ev, cfg, parts).item()
    assert total == pytest.approx(parts["l_ent"] + parts["l_inv"], rel=1e-12)
    no_inv = loss_head(ev, HeadConfig(3, lam=0.1, gamma=0.0)).item()
    assert no_inv == pytest.approx(loss_entropy_kl(ev + 1.0, 0.1).item(), rel=1e-12)


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(1)
    with pytest.raises(ValueError):
        HeadConfig(3, lam=-1)
    with pytest.raises(ValueError):
        HeadConfig(3, entropy_sign="up")


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(0, 1e6)))
def test_opinion_invariants(e):
    o = evidence_to_opinion(e)
    assert abs(o.belief.sum() + o.uncertainty[0] - 1.0) < 1e-9
    assert abs(o.probability.sum() - 1.0) < 1e-9
    assert 0 < o.uncertainty[0] <= 1
    assert np.all(o.alpha >= 1)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(0.01, 100)), st.floats(1.01, 10))
def test_scaling_evidence_decreases_uncertainty(e, t):
    assert evidence_to_opinion(e * t).uncertainty[0] < evidence_to_opinion(e).uncertainty[0]


def test_head_gradient_with_nu_differentiated():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(6, 4))
    head = EvidentialHead.random(4, 3, rng)
    cfg = HeadConfig(3, iec_gradient=True)
    err = T.finite_diff_check(lambda w: loss_head(head.evidence(feats, w, head.bias), cfg), head.weight)
    assert err < 1e-4


def test_head_gradient_treats_nu_as_constant():
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(6, 4))
    head = EvidentialHead.random(4, 3, rng)
    cfg = HeadConfig(3)
    nu = iec_score(head.opinions(feats), clip=True)

    def frozen(w):
        alpha = head.evidence(feats, w, head.bias) + 1.0
        u = 3.0 / alpha.sum(axis=-1)
        return loss_entropy_kl(alpha, cfg.lam) + loss_inverse(nu, u) * cfg.gamma

    with T.Tape() as tape:
        w = T.Tensor(head.weight, requires_grad=True)
        loss = loss_head(head.evidence(feats, w, head.bias), cfg)
    T.backward(tape, loss)
    assert loss.item() == pytest.approx(frozen(head.weight).item(), rel=1e-12)
    np.testing.assert_allclose(w.grad, T.gradient(frozen, head.weight), rtol=1e-10, atol=1e-12)
    assert T.finite_diff_check(frozen, head.weight) < 1e-4


def _cluster_backbone(rng):
    spec = MLPSpec((2, 8, 2))
    return init_archive(spec, rng)


def test_train_head_zero_epochs_is_identity():
    rng = np.random.default_rng(0)
    backbone = _cluster_backbone(rng)
    head = EvidentialHead.random(8, 2, rng)
    out, trace = train_head(backbone, head, rng.normal(size=(10, 2)), HeadConfig(2), 0, 0.1)
    assert out is head and trace.loss == []


def test_train_head_keeps_backbone_frozen():
    rng = np.random.default_rng(0)
    backbone = _cluster_backbone(rng)
    before = to_bytes(backbone)
    head = EvidentialHead.random(8, 2, rng)
    train_head(backbone, head, rng.normal(size=(40, 2)), HeadConfig(2), 3, 0.01, 16, rng)
    assert to_bytes(backbone) == before


def test_train_head_uncertainty_lower_on_clusters_than_far_probes():
    rng = np.random.default_rng(2)
    centers = np.array([[2.0, 0.0], [-2.0, 0.0]])
    x = np.concatenate([c + 0.3 * rng.normal(size=(100, 2)) for c in centers])
    backbone = _cluster_backbone(rng)
    head = EvidentialHead.random(8, 2, rng)
    cfg = HeadConfig(2, entropy_sign="minimize-entropy")
    trained, trace = train_head(backbone, head, x, cfg, 60, 0.05, 32, rng)
    assert trace.loss[-1] < trace.loss[0]
    from evimerge.network import pooled_features

    u_centers = trained.opinions(pooled_features(backbone, centers)).uncertainty.mean()
    probes = np.array([[0.0, 6.0], [0.0, -6.0], [0.0, 9.0], [0.0, -9.0]])
    u_far = trained.opinions(pooled_features(backbone, probes)).uncertainty.mean()
    assert u_centers < u_far


def test_train_head_aborts_on_nan():
    rng = np.random.default_rng(0)
    backbone = _cluster_backbone(rng)
    head = EvidentialHead.random(8, 2, rng)
    x = rng.normal(size=(8, 2))
    x[3, 0] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(TrainingDiverged, match="epoch 0, batch 0"):
        train_head(backbone, head, x, HeadConfig(2), 2, 0.1, 8, rng)


def test_head_archive_round_trip():
    rng = np.random.default_rng(0)
    head = EvidentialHead.random(4, 3, rng)
    arch = head.to_archive()
    assert arch.metadata["role"] == "evidential_head"
    back = EvidentialHead.from_archive(arch)
    np.testing.assert_array_equal(back.weight, head.weight)
    with pytest.raises(ValueError, match="role"):
        EvidentialHead.from_archive(init_archive(MLPSpec((2, 3)), rng))
