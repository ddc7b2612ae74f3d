"""Embedding, feature-space augmentation and the bi-path comparator."""

import time

import numpy as np
import pytest

from abnet.augment import AffineBank, affine_grid_sample, augment_family, init_bank
from abnet.backbone import Backbone, FeatureMap, FeatureSet, embed, embed_set, feature_size
from abnet.compare import (
    Comparator,
    SimilarityGroup,
    build_group,
    classify_query,
    merge_score,
    pair_tensor,
    similarity_map,
)
from abnet.config import TrainConfig
from abnet.model import ABNet
from abnet.nn import Tensor, finite_diff_check, no_record, ops
from abnet.saliency import BoundingBox, PatchSet


def with_running_stats(module, seed=0):
    """Eval mode after filling every batchnorm with random running statistics."""
    rng = np.random.default_rng(seed)
    for m in module._walk():
        if hasattr(m, "bn"):
            c = m.bn.mean.size
            m.bn.update(rng.normal(0, 0.3, size=c), rng.uniform(0.5, 2.0, size=c))
    return module.eval()


# ---------------------------------------------------------------- backbone


def test_backbone_shapes():
    rng = np.random.default_rng(0)
    net = Backbone(rng, channels=64)
    start = time.perf_counter()
    out = embed(rng.uniform(size=(3, 84, 84)), net)
    assert time.perf_counter() - start < 1.0
    assert out.tensor.shape == (64, 19, 19)
    assert embed(rng.uniform(size=(3, 32, 32)), net).tensor.shape == (64, 6, 6)
    for s in range(12, 40):
        a = s - 2
        a = (a // 2 - 2) // 2
        assert feature_size(s) == a
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((1, 3, 8, 8))))


def test_backbone_eval_determinism_and_shared_weights():
    rng = np.random.default_rng(1)
    net = with_running_stats(Backbone(rng, channels=8))
    x = rng.uniform(size=(3, 16, 16))
    assert np.array_equal(embed(x, net).tensor.data, embed(x.copy(), net).tensor.data)
    img = rng.uniform(size=(16, 16, 3))
    full = BoundingBox(0, 0, 16, 16)
    part = BoundingBox(2, 3, 8, 9)
    fs = embed_set(img, PatchSet((full, part, full, part, full), (0.0,) * 5, 2), net, 16)
    assert len(fs.patches) == 5
    assert np.array_equal(fs.patches[0].tensor.data, fs.global_map.tensor.data)
    assert np.array_equal(fs.patches[1].tensor.data, fs.patches[3].tensor.data)
    # one parameter set: every block kernel is a single object
    ids = {id(p) for p in net.parameters()}
    assert len(ids) == len(net.parameters())


# ---------------------------------------------------------------- augmentation


def test_identity_affine_is_exact():
    x = np.random.default_rng(0).normal(size=(4, 5, 6))
    assert np.array_equal(affine_grid_sample(Tensor(x), Tensor(np.eye(3, 4))).data, x)


def test_translation_shifts_one_column():
    x = np.random.default_rng(1).normal(size=(3, 4, 6))
    theta = np.eye(3, 4)
    theta[0, 3] = 2.0 / (6 - 1)
    out = affine_grid_sample(Tensor(x), Tensor(theta)).data
    expected = np.zeros_like(x)
    expected[:, :, :-1] = x[:, :, 1:]
    assert np.max(np.abs(out - expected)) <= 1e-12
    back = theta.copy()
    back[0, 3] = -back[0, 3]
    twice = affine_grid_sample(Tensor(out), Tensor(back)).data
    assert np.max(np.abs(twice[:, :, 1:-1] - x[:, :, 1:-1])) <= 1e-12


def test_affine_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    theta = Tensor(np.eye(3, 4) + rng.uniform(-0.1, 0.1, size=(3, 4)))
    r = rng.normal(size=(2, 3, 5, 5))
    assert finite_diff_check(lambda: ops.sum_(ops.mul(affine_grid_sample(x, theta), r)), [x, theta]) <= 1e-4


def test_bank_init_and_family():
    a, b = init_bank(4, seed=3), init_bank(4, seed=3)
    assert np.array_equal(a.matrices.data, b.matrices.data)
    assert not np.array_equal(a.matrices.data, init_bank(4, seed=4).matrices.data)
    assert np.max(np.abs(a.matrices.data - np.eye(3, 4))) <= 0.2
    with pytest.raises(ValueError):
        AffineBank(0)
    f = Tensor(np.random.default_rng(5).normal(size=(3, 4, 4)))
    fam = augment_family(f, a)
    assert len(fam) == 5 and fam[0] is f
    ident = AffineBank(4)
    ident.matrices.data[:] = np.eye(3, 4)
    fam = augment_family(f, ident)
    assert all(np.array_equal(m.data, f.data) for m in fam.members)


def test_spatial_only_affine_keeps_channels():
    bank = AffineBank(2, seed=0, spatial_only=True)
    m = bank.matrix(1).data
    assert np.array_equal(m[2], [0.0, 0.0, 1.0, 0.0])
    assert m[0, 2] == 0.0 and m[1, 2] == 0.0
    assert np.array_equal(bank.matrix(0).data, np.eye(3, 4))


# ---------------------------------------------------------------- comparator


def _comparator(n_members=5, n_patches=5, channels=3, c_feat=4, side=6, **kw):
    return with_running_stats(Comparator(np.random.default_rng(0), c_feat, side, n_members, n_patches, channels=channels, **kw))


def _feature_set(rng, n, c=4, side=6):
    maps = [FeatureMap(Tensor(rng.normal(size=(c, side, side))), "x") for _ in range(n + 1)]
    return FeatureSet(maps[0], maps[1:])


def test_pair_tensor_order_and_errors():
    a, b = Tensor(np.zeros((2, 3, 3))), Tensor(np.ones((2, 3, 3)))
    ab = pair_tensor(a, b).data
    assert ab.shape == (4, 3, 3) and not np.array_equal(ab, pair_tensor(b, a).data)
    with pytest.raises(ValueError):
        pair_tensor(a, Tensor(np.zeros((3, 3, 3))))


def test_group_has_one_plus_n_squared_maps():
    rng = np.random.default_rng(0)
    bank = init_bank(4)
    comp = _comparator()
    with no_record():
        group = build_group(_feature_set(rng, 5), _feature_set(rng, 5), bank, comp)
    assert len(group) == 26
    assert len(group.weights) == 5 and all(len(r) == 5 for r in group.weights)
    assert all(0.0 < w.item() < 1.0 for r in group.weights for w in r)
    assert group.global_map.shape == (3, 3, 3)
    assert comp.merge_blocks[0].kernels.shape[1] == 26 * 3
    assert comp.h.kernels.shape[1] == 5 * 3
    single = _comparator(n_patches=1)
    with no_record():
        assert len(build_group(_feature_set(rng, 1), _feature_set(rng, 1), bank, single)) == 2


def test_duplicated_support_patches_give_identical_rows():
    rng = np.random.default_rng(1)
    comp = _comparator(n_patches=3)
    support = _feature_set(rng, 3)
    support.patches[2] = support.patches[0]
    with no_record():
        g = build_group(support, _feature_set(rng, 3), init_bank(4), comp)
    for j in range(3):
        assert np.array_equal(g.locals[0][j].data, g.locals[2][j].data)
        assert g.weights[0][j].item() == g.weights[2][j].item()


def test_identity_bank_gives_identical_g_outputs():
    rng = np.random.default_rng(2)
    comp = _comparator()
    bank = AffineBank(4)
    bank.matrices.data[:] = np.eye(3, 4)
    f = Tensor(rng.normal(size=(4, 6, 6)))
    fam = augment_family(Tensor(rng.normal(size=(4, 6, 6))), bank)
    outs = [comp.g(pair_tensor(f, m)).data for m in fam.members]
    assert all(np.array_equal(o, outs[0]) for o in outs)
    assert similarity_map(f, fam, comp).shape == (3, 3, 3)


def test_zero_attention_gates_out_local_maps():
    rng = np.random.default_rng(3)
    comp = _comparator(n_patches=2)
    with no_record():
        g = build_group(_feature_set(rng, 2), _feature_set(rng, 2), init_bank(4), comp)
        zeros = [[Tensor(0.0)] * 2 for _ in range(2)]
        base = merge_score(SimilarityGroup(g.global_map, g.locals, zeros), comp).item()
        noisy = [[Tensor(rng.normal(size=m.shape) * 10) for m in row] for row in g.locals]
        assert merge_score(SimilarityGroup(g.global_map, noisy, zeros), comp).item() == base
        assert 0.0 < merge_score(g, comp).item() < 1.0


def test_attention_with_zero_last_layer_is_half():
    rng = np.random.default_rng(4)
    comp = _comparator(n_patches=2)
    last = comp.attention[-1]
    for p in last.parameters():
        p.data[...] = 0.0
    with no_record():
        g = build_group(_feature_set(rng, 2), _feature_set(rng, 2), init_bank(4), comp)
    assert all(w.item() == 0.5 for r in g.weights for w in r)


def test_classify_query_examples():
    pred, per = classify_query([0.9, 0.9, 0.1, 0.1, 0.5], [0, 0, 0, 0, 0])
    assert pred == 0 and per[0] == pytest.approx(0.5, abs=1e-15)
    pred, per = classify_query([0.3, 0.7], [0, 1])
    assert pred == 1 and list(per) == [0.3, 0.7]
    assert classify_query([0.5, 0.5], [0, 1])[0] == 0
    with pytest.raises(ValueError):
        classify_query([0.1, 0.2], [0, 0], n_classes=2)
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(5), 2)
    for _ in range(50):
        pred, per = classify_query(rng.uniform(size=10), labels)
        assert int(np.argmax(np.exp(3 * per) + 1)) == pred


def _tiny_cfg(**kw):
    base = dict(way=2, shot=2, queries=2, image_size=16, n_patches=2, k_affine=2,
                backbone_channels=4, comparator_channels=3, merge_hidden=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("switches", [
    {},
    dict(reweight=False),
    dict(salient_patches=False, reweight=False),
    dict(learn_augment=False, handcrafted_aug=True, salient_patches=False, reweight=False),
    dict(attention_on_global=True),
])
def test_batched_scores_match_per_pair_route(switches):
    cfg = _tiny_cfg(**switches)
    model = with_running_stats(ABNet(cfg))
    rng = np.random.default_rng(5)
    P1 = 1 + cfg.patches_per_image
    sup = rng.uniform(size=(4, P1, 3, 16, 16))
    qry = rng.uniform(size=(3, P1, 3, 16, 16))
    with no_record():
        batched = model.forward(sup, qry).scores.scores.data
        fs = model._embed(sup)
        fq = model._embed(qry)
        hand = None
        if cfg.handcrafted_aug:
            hand = model._embed(model._handcrafted(sup).reshape((-1, P1, 3, 16, 16)))
            hand = hand.data.reshape((4, 4, P1) + hand.shape[2:])
        for q in range(3):
            for s in range(4):
                qs = FeatureSet(FeatureMap(fq[q][0], "global"), [FeatureMap(fq[q][i], "p") for i in range(1, P1)])
                ss = FeatureSet(FeatureMap(fs[s][0], "global"), [FeatureMap(fs[s][i], "p") for i in range(1, P1)])
                extra = None
                if hand is not None:
                    extra = [[Tensor(hand[t, s, slot]) for t in range(4)] for slot in range(P1)]
                group = build_group(ss, qs, model.bank, model.comparator, extra_members=extra)
                assert len(group) == 1 + cfg.patches_per_image ** 2
                assert abs(merge_score(group, model.comparator).item() - batched[q, s]) <= 1e-10


def test_linear_merge_output_is_the_sigmoid_logit():
    rng = np.random.default_rng(6)
    sup, qry = _feature_set(rng, 1), _feature_set(rng, 1)
    bank = init_bank(4)
    with no_record():
        scores = []
        for flag in (True, False):
            comp = _comparator(n_patches=1, merge_sigmoid=flag)
            scores.append(merge_score(build_group(sup, qry, bank, comp), comp).item())
    assert abs(scores[0] - 1.0 / (1.0 + np.exp(-scores[1]))) <= 1e-12
