"""Classification, attention and augmentation losses."""

import numpy as np
import pytest

from abnet.augment import AffineBank, affine_grid_sample
from abnet.losses import loss_att, loss_aug, loss_cls, prob_score, total_loss
from abnet.nn import Adam, ParamGroup, Tape, Tensor, backward, finite_diff_check, ops


def test_prob_score():
    assert prob_score(Tensor(0.0)).item() == 0.5
    o = np.linspace(-30, 30, 61)
    p = prob_score(Tensor(o)).data
    assert np.all(np.diff(p) > 0) and p[-1] > 1 - 1e-12
    assert np.allclose(prob_score(Tensor(-o)).data, 1 - p, atol=1e-15)


def test_loss_cls_examples_and_oracle():
    labels_q, labels_s = [0, 1, 1], [0, 1]
    perfect = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    assert loss_cls(Tensor(perfect), labels_q, labels_s).item() == 0.0
    assert loss_cls(Tensor([[0.5]]), [3], [3]).item() == 0.25
    rng = np.random.default_rng(0)
    for _ in range(20):
        B, C = rng.integers(1, 8, size=2)
        s = rng.integers(0, 3, size=C)
        q = rng.choice(s, size=B)
        P = rng.uniform(size=(B, C))
        total = 0.0
        for i in range(B):
            for j in range(C):
                total += (P[i, j] - (1.0 if q[i] == s[j] else 0.0)) ** 2
        got = loss_cls(Tensor(P), q, s).item()
        assert abs(got - total / (B * C)) <= 1e-12
        assert 0.0 <= got <= 1.0
    with pytest.raises(ValueError):
        loss_cls(Tensor(np.zeros((1, 2))), [5], [0, 1])
    with pytest.raises(ValueError):
        loss_cls(Tensor(np.zeros((2, 2))), [0], [0, 1])


def test_loss_att():
    assert loss_att(Tensor(np.full((4, 4), 1e-9))).item() < 1e-8
    for n in (1, 3, 5):
        assert loss_att(Tensor(np.ones((n, n)))).item() == 1.0
    w = np.random.default_rng(1).uniform(size=(2, 3, 5, 5))
    assert abs(loss_att(Tensor(w)).item() - w.mean()) <= 1e-15


def test_loss_aug_examples_and_oracle():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(2, 3, 4, 4))
    member = rng.normal(size=(2, 3, 4, 4))
    assert loss_aug(Tensor(q), [Tensor(member)], [0, 0], [1, 1]).item() == 0.0
    assert loss_aug(Tensor(q), [Tensor(q), Tensor(q)], [0, 1], [0, 1]).item() == 0.0
    members = [rng.normal(size=(3, 3, 4, 4)) for _ in range(2)]
    ql, sl = [0, 1], [1, 0, 1]
    s_aug = 1.0 / 48
    expect = 0.0
    for i in range(2):
        for j in range(3):
            if ql[i] == sl[j]:
                for m in members:
                    expect += np.sum((q[i] - m[j]) ** 2)
    expect *= s_aug / 6
    got = loss_aug(Tensor(q), [Tensor(m) for m in members], ql, sl).item()
    assert abs(got - expect) <= 1e-12 * max(1.0, expect)


def test_total_loss_composition_and_gradient():
    br = total_loss(Tensor(0.2), Tensor(1.0), Tensor(3.0))
    assert br.total.item() == pytest.approx(0.6, abs=1e-15)
    assert total_loss(Tensor(0.3), Tensor(5.0), Tensor(7.0), 0.0, 0.0).total.item() == 0.3
    rng = np.random.default_rng(3)
    o = Tensor(rng.normal(size=(2, 3)))
    w = Tensor(rng.uniform(0.1, 0.9, size=(2, 3, 2, 2)))
    f = Tensor(rng.normal(size=(2, 2, 3, 3)))
    m = Tensor(rng.normal(size=(3, 2, 3, 3)))
    ql, sl = [0, 1], [0, 1, 1]

    def total():
        return total_loss(loss_cls(prob_score(o), ql, sl), loss_att(w), loss_aug(f, [m], ql, sl)).total

    assert finite_diff_check(total, [o, w, f, m]) <= 1e-6
    for x in (o, w, f, m):
        x.requires_grad = True
    with Tape() as tape:
        t = total()
    backward(t, tape)
    summed = {}
    for lam, part in ((1.0, lambda: loss_cls(prob_score(o), ql, sl)), (0.1, lambda: loss_att(w)),
                      (0.1, lambda: loss_aug(f, [m], ql, sl))):
        grads_before = [x.grad.copy() for x in (o, w, f, m)]
        for x in (o, w, f, m):
            x.grad = None
        with Tape() as tape:
            v = ops.mul(part(), lam)
        backward(v, tape)
        for x in (o, w, f, m):
            if x.grad is not None:
                summed[id(x)] = summed.get(id(x), 0.0) + x.grad
        for x, g in zip((o, w, f, m), grads_before):
            x.grad = g
    for x in (o, w, f, m):
        assert np.allclose(x.grad, summed[id(x)], rtol=0, atol=1e-12)


def test_aug_step_pulls_variants_toward_query():
    rng = np.random.default_rng(4)
    bank = AffineBank(2, seed=1)
    s = Tensor(rng.normal(size=(1, 3, 5, 5)))
    q = Tensor(rng.normal(size=(1, 3, 5, 5)))

    def distance():
        return sum(float(np.sum((q.data - affine_grid_sample(s, bank.matrix(k)).data) ** 2)) for k in (1, 2))

    before = distance()
    opt = Adam([ParamGroup(bank.parameters(), 1e-3)])
    with Tape() as tape:
        loss = loss_aug(q, [affine_grid_sample(s, bank.matrix(k)) for k in (1, 2)], [0], [0])
    backward(loss, tape)
    opt.step()
    assert distance() < before
