import numpy as np
import pytest

from conglude.errors import ContractError, NumericError
from conglude.losses import (
    ComplexEmbedding,
    LossConfig,
    closest_pocket_index,
    confidence_target,
    confidence_targets,
    cosine_similarity,
    info_nce,
    loss_bsc,
    loss_confidence,
    loss_contrastive_sb,
    loss_dice,
    loss_geometric,
    loss_lb,
)
from conglude.numcore import Tensor
from helpers import assert_gradcheck

CFG = LossConfig.for_dim(4)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# -- info_nce ---------------------------------------------------------------------


def test_info_nce_single_candidate_is_exactly_zero():
    q = Tensor([1.0, 0.0])
    k = Tensor([0.5, 0.5])
    assert info_nce(q, k, [k], tau=0.7).item() == 0.0


def test_info_nce_uniform_similarities_log_j():
    q = Tensor([1.0, 0.0, 0.0])
    candidates = [Tensor([0.0, 1.0, 0.0]) for _ in range(4)]
    loss = info_nce(q, candidates[0], candidates, tau=0.3)
    assert abs(loss.item() - np.log(4.0)) < 1e-9


def test_info_nce_hand_value():
    e1 = Tensor([1.0, 0.0])
    neg = Tensor([-1.0, 0.0])
    loss = info_nce(e1, e1, [e1, neg], tau=1.0)
    # -log(e / (e + e^-1)) evaluated by hand
    assert abs(loss.item() - 0.12692801104297263) < 1e-12


def test_info_nce_positive_must_be_candidate():
    q = Tensor([1.0, 0.0])
    with pytest.raises(ContractError):
        info_nce(q, Tensor([0.0, 1.0]), [Tensor([1.0, 1.0])], tau=1.0)


def test_info_nce_rescaling_invariance():
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=6))
    cands = [Tensor(rng.normal(size=6)) for _ in range(5)]
    base = info_nce(q, cands[2], cands, tau=0.5).item()
    scaled_q = Tensor(q.data * 37.0)
    assert abs(info_nce(scaled_q, cands[2], cands, tau=0.5).item() - base) < 1e-9
    cands2 = [Tensor(c.data * (3.0 if i == 4 else 1.0)) for i, c in enumerate(cands)]
    assert abs(info_nce(q, cands2[2], cands2, tau=0.5).item() - base) < 1e-9


def test_cosine_zero_norm_rejected():
    with pytest.raises(NumericError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_info_nce_gradcheck():
    rng = np.random.default_rng(1)
    q = Tensor(rng.normal(size=5), requires_grad=True)
    cands = [Tensor(rng.normal(size=5), requires_grad=True) for _ in range(4)]
    params = {"q": q, **{f"c{i}": c for i, c in enumerate(cands)}}
    assert_gradcheck(lambda: info_nce(q, cands[1], cands, tau=0.5), params)


# -- geometric losses ---------------------------------------------------------------


def test_bsc_examples():
    centers = Tensor(np.array([[1.0, 0, 0], [5.0, 0, 0]]))
    assert loss_bsc(centers, np.zeros(3)).item() == 1.0
    perfect = Tensor(np.array([[0.0, 0, 0], [5.0, 0, 0]]))
    assert loss_bsc(perfect, np.zeros(3)).item() == 0.0


def test_bsc_gradient_flows_through_argmin_only():
    centers = Tensor(np.array([[1.0, 0, 0], [5.0, 0, 0]]), requires_grad=True)
    loss_bsc(centers, np.zeros(3)).backward()
    assert np.all(centers.grad[1] == 0.0)
    assert np.any(centers.grad[0] != 0.0)
    assert_gradcheck(lambda: loss_bsc(centers, np.zeros(3)), {"c": centers})


def test_dice_values():
    labels = np.array([1, 1, 1, 1, 1, 0, 0])
    perfect = Tensor(labels.astype(float))
    assert loss_dice(perfect, labels).item() == 0.0
    all_zero = Tensor(np.zeros(7))
    assert abs(loss_dice(all_zero, labels, eps=1e-6).item() - (1.0 - 1e-6 / (5.0 + 1e-6))) < 1e-15
    assert loss_dice(Tensor(np.zeros(3)), np.zeros(3)).item() == 0.0


def test_dice_gradcheck():
    rng = np.random.default_rng(2)
    scores = Tensor(rng.random(6), requires_grad=True)
    labels = np.array([1, 0, 1, 1, 0, 0])
    assert_gradcheck(lambda: loss_dice(scores, labels), {"s": scores})


def test_confidence_target_values():
    z = np.zeros(3)
    assert confidence_target(z, z, gamma=4.0, c0=0.001) == 1.0
    assert confidence_target(z, np.array([4.0, 0, 0]), gamma=4.0) == 0.5
    assert confidence_target(z, np.array([5.0, 0, 0]), gamma=4.0, c0=0.001) == 0.001


def test_confidence_targets_use_nearest_site():
    preds = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    sites = [np.array([1.0, 0, 0]), np.array([10.0, 0, 0])]
    targets = confidence_targets(preds, sites)
    assert targets[0] == 1.0 - 1.0 / 8.0
    assert targets[1] == 1.0


def test_loss_confidence_mse():
    conf = Tensor(np.array([0.2, 0.8]))
    targets = np.array([0.2, 0.8])
    assert loss_confidence(conf, targets).item() == 0.0
    off = Tensor(np.array([0.0, 1.0]))
    assert abs(loss_confidence(off, targets).item() - ((0.2**2 + 0.2**2) / 2)) < 1e-12


def test_confidence_gradcheck():
    rng = np.random.default_rng(3)
    conf = Tensor(rng.random(4), requires_grad=True)
    targets = rng.random(4)
    assert_gradcheck(lambda: loss_confidence(conf, targets), {"c": conf})


def test_loss_geometric_composes_and_gates():
    rng = np.random.default_rng(4)
    centers = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    conf = Tensor(rng.random(3), requires_grad=True)
    seg = Tensor(rng.random(5), requires_grad=True)
    site = rng.normal(size=3)
    labels = np.array([1, 0, 0, 1, 0])
    total = loss_geometric(centers, conf, seg, site, labels, [site], CFG)
    parts = (
        loss_bsc(centers, site).item()
        + loss_dice(seg, labels, CFG.dice_eps).item()
        + loss_confidence(conf, confidence_targets(centers.data, [site])).item()
    )
    assert abs(total.item() - parts) < 1e-12

    off = LossConfig.for_dim(4, enable_geometric=False)
    assert loss_geometric(centers, conf, seg, site, labels, [site], off).item() == 0.0
    gated = LossConfig.for_dim(4, enable_bsc=False, enable_seg=False, enable_confidence=False)
    assert loss_geometric(centers, conf, seg, site, labels, [site], gated).item() == 0.0


def test_loss_geometric_perfect_prediction_zero():
    site = np.array([1.0, 2.0, 3.0])
    centers = Tensor(site[None, :].copy())
    conf = Tensor(np.array([1.0]))
    labels = np.array([1, 0])
    seg = Tensor(labels.astype(float))
    total = loss_geometric(centers, conf, seg, site, labels, [site], CFG)
    assert total.item() == 0.0


# -- structure-based contrastive -------------------------------------------------------


def make_complex(rng, d=4, k=3, selected=0):
    pockets = Tensor(rng.normal(size=(k, d)), requires_grad=True)
    protein = Tensor(rng.normal(size=d), requires_grad=True)
    joint = Tensor(rng.normal(size=2 * d), requires_grad=True)
    return ComplexEmbedding(
        protein=protein,
        pockets=pockets,
        selected=selected,
        ligand_joint=joint,
        ligand_protein=joint[:d],
        ligand_pocket=joint[d:],
    )


def test_contrastive_single_complex_single_pocket_zero():
    rng = np.random.default_rng(5)
    s = make_complex(rng, k=1)
    assert abs(loss_contrastive_sb([s], CFG).item()) < 1e-12


def test_contrastive_rejects_empty_batch():
    with pytest.raises(ContractError):
        loss_contrastive_sb([], CFG)


def test_closest_pocket_tie_breaks_low_index():
    centers = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert closest_pocket_index(np.zeros(3), centers) == 0


def test_contrastive_batch_permutation_invariant():
    rng = np.random.default_rng(6)
    batch = [make_complex(rng, selected=i % 2) for i in range(4)]
    base = loss_contrastive_sb(batch, CFG).item()
    assert abs(loss_contrastive_sb(batch[::-1], CFG).item() - base) < 1e-9


def test_contrastive_pocket_order_invariant():
    rng = np.random.default_rng(7)
    s = make_complex(rng, k=3, selected=1)
    base = loss_contrastive_sb([s], CFG).item()
    perm = [2, 1, 0]
    permuted = ComplexEmbedding(
        protein=s.protein,
        pockets=Tensor(s.pockets.data[perm]),
        selected=1,  # same pocket after permutation
        ligand_joint=s.ligand_joint,
        ligand_protein=s.ligand_protein,
        ligand_pocket=s.ligand_pocket,
    )
    assert abs(loss_contrastive_sb([permuted], CFG).item() - base) < 1e-9


def test_contrastive_flags_gate_terms():
    rng = np.random.default_rng(8)
    batch = [make_complex(rng) for _ in range(3)]
    full = loss_contrastive_sb(batch, CFG).item()
    no_m2b = loss_contrastive_sb(batch, LossConfig.for_dim(4, enable_m2b=False)).item()
    only_m2b = loss_contrastive_sb(
        batch, LossConfig.for_dim(4, enable_p2m=False, enable_m2p=False)
    ).item()
    assert abs((no_m2b + only_m2b) - full) < 1e-9
    none = loss_contrastive_sb(
        batch, LossConfig.for_dim(4, enable_p2m=False, enable_m2p=False, enable_m2b=False)
    ).item()
    assert none == 0.0


def test_contrastive_gradcheck_all_axes():
    rng = np.random.default_rng(9)
    batch = [make_complex(rng, d=3, k=2, selected=i % 2) for i in range(2)]
    params = {}
    for i, s in enumerate(batch):
        params[f"protein{i}"] = s.protein
        params[f"pockets{i}"] = s.pockets
    # ligand_joint slices feed m2p/m2b, so check through the shared parent
    for i, s in enumerate(batch):
        params[f"ligand{i}"] = s.ligand_joint

    def loss():
        rebuilt = [
            ComplexEmbedding(
                protein=s.protein,
                pockets=s.pockets,
                selected=s.selected,
                ligand_joint=s.ligand_joint,
                ligand_protein=s.ligand_joint[:3],
                ligand_pocket=s.ligand_joint[3:],
            )
            for s in batch
        ]
        return loss_contrastive_sb(rebuilt, LossConfig.for_dim(3))

    assert_gradcheck(loss, params)


# -- ligand-based -----------------------------------------------------------------------


def test_lb_orthogonal_gives_log2():
    p = Tensor([1.0, 0.0])
    m = [Tensor([0.0, 1.0])]
    for label in (0, 1):
        loss = loss_lb(p, m, np.array([label]))
        assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_lb_aligned_positive_hand_value():
    p = Tensor([2.0, 0.0])
    m = [Tensor([5.0, 0.0])]  # cosine exactly 1
    loss = loss_lb(p, m, np.array([1]))
    assert abs(loss.item() - 0.3132616875182228) < 1e-12


def test_lb_mean_over_identical_samples():
    p = Tensor([1.0, 1.0])
    m1 = [Tensor([0.3, -0.2])]
    m4 = [Tensor([0.3, -0.2]) for _ in range(4)]
    a = loss_lb(p, m1, np.array([1])).item()
    b = loss_lb(p, m4, np.ones(4, dtype=int)).item()
    assert abs(a - b) < 1e-12


def test_lb_zero_norm_rejected():
    with pytest.raises(NumericError):
        loss_lb(Tensor([1.0, 0.0]), [Tensor([0.0, 0.0])], np.array([1]))


def test_lb_gradcheck():
    rng = np.random.default_rng(10)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    parts = [Tensor(rng.normal(size=4), requires_grad=True) for _ in range(3)]
    labels = np.array([1, 0, 1])
    params = {"p": p, **{f"m{i}": m for i, m in enumerate(parts)}}
    assert_gradcheck(lambda: loss_lb(p, parts, labels), params)


def test_every_loss_nonnegative_random_inputs():
    rng = np.random.default_rng(11)
    for _ in range(10):
        batch = [make_complex(rng) for _ in range(3)]
        assert loss_contrastive_sb(batch, CFG).item() >= 0.0
        centers = Tensor(rng.normal(size=(4, 3)))
        assert loss_bsc(centers, rng.normal(size=3)).item() >= 0.0
        scores = Tensor(rng.random(6))
        assert loss_dice(scores, rng.integers(0, 2, 6)).item() >= 0.0
        conf = Tensor(rng.random(4))
        assert loss_confidence(conf, rng.random(4)).item() >= 0.0
        p = Tensor(rng.normal(size=4))
        parts = [Tensor(rng.normal(size=4)) for _ in range(3)]
        assert loss_lb(p, parts, rng.integers(0, 2, 3)).item() >= 0.0
