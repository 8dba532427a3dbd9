import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvdecor import autodiff as ad
from mvdecor.autodiff import Tensor
from mvdecor.losses import (LossConfig, LossError, cross_entropy, info_nce, joint_finetune_loss,
                            ssl_loss_over_batch)
from mvdecor.nn import EmbedNet, SegHead, view_input
from mvdecor.correspond import PairSample

from helpers import gradcheck


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def nce_oracle(ei, ej, pairs, tau):
    total = 0.0
    for p, q in pairs:
        num = math.exp(float(ei[p] @ ej[q]) / tau)
        den = sum(math.exp(float(ei[p] @ ej[k]) / tau) for _, k in pairs)
        total -= math.log(num / den)
    return total


def test_one_positive_one_orthogonal_negative():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    # pair 0: p=0 matches q=0 (identical); pair 1 supplies the orthogonal negative k=1
    loss_first = info_nce(Tensor(e), Tensor(e), np.array([[0, 0], [1, 1]]), 0.07, "sum")
    per = math.log(1 + math.exp(-1 / 0.07))
    assert abs(per - 6.2e-7) < 1e-8
    assert abs(loss_first.item() - 2 * per) < 1e-12


def test_identical_embeddings_give_ln2_each():
    e = unit(np.ones((2, 4)))
    loss = info_nce(Tensor(e), Tensor(e), np.array([[0, 1], [1, 0]]), 0.07, "sum")
    assert abs(loss.item() - 2 * math.log(2)) < 1e-12


def test_matches_scalar_oracle_and_mean():
    r = np.random.default_rng(0)
    ei, ej = unit(r.normal(size=(20, 5))), unit(r.normal(size=(20, 5)))
    pairs = np.stack([r.permutation(20)[:7], r.permutation(20)[:7]], axis=1)
    s = info_nce(Tensor(ei), Tensor(ej), pairs, 0.07, "sum").item()
    m = info_nce(Tensor(ei), Tensor(ej), pairs, 0.07, "mean").item()
    assert abs(s - nce_oracle(ei, ej, pairs, 0.07)) < 1e-9
    assert abs(m - s / 7) < 1e-12


def test_info_nce_gradcheck():
    r = np.random.default_rng(1)
    ei, ej = unit(r.normal(size=(6, 4))), unit(r.normal(size=(6, 4)))
    pairs = np.array([[0, 1], [2, 3], [4, 5], [1, 0]])
    err = gradcheck(lambda a, b: info_nce(a, b, pairs, 0.07, "sum"), [ei, ej])
    assert err <= 1e-4


def test_info_nce_errors():
    e = unit(np.ones((3, 2)))
    with pytest.raises(LossError):
        info_nce(Tensor(e), Tensor(e), np.array([[0, 0]]))
    with pytest.raises(LossError):
        info_nce(Tensor(e * 2), Tensor(e), np.array([[0, 0], [1, 1]]), check=True)
    with pytest.raises(LossError):
        info_nce(Tensor(e), Tensor(e), np.array([[0, 0], [1, 1]]), reduction="max")


def test_invalid_pixels_are_dropped():
    r = np.random.default_rng(2)
    ei, ej = unit(r.normal(size=(5, 3))), unit(r.normal(size=(5, 3)))
    pairs = np.array([[0, 0], [1, 1], [2, 2], [3, 3]])
    valid = np.array([True, True, False, True, True])
    a = info_nce(Tensor(ei), Tensor(ej), pairs, valid_i=valid).item()
    b = info_nce(Tensor(ei), Tensor(ej), pairs[[0, 1, 3]]).item()
    assert a == b


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_nonnegative_and_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 12))
    ei, ej = unit(r.normal(size=(n, 4))), unit(r.normal(size=(n, 4)))
    pairs = np.stack([r.permutation(n), r.permutation(n)], axis=1)
    base = info_nce(Tensor(ei), Tensor(ej), pairs, 0.07, "sum").item()
    shuf = info_nce(Tensor(ei), Tensor(ej), pairs[r.permutation(n)], 0.07, "sum").item()
    assert base >= 0
    assert abs(base - shuf) <= 1e-6 * max(1.0, abs(base))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_separation_property(seed, step):
    # moving e_q toward e_p with the negatives fixed lowers that pair's term
    r = np.random.default_rng(seed)
    ep = unit(r.normal(size=3))
    neg = unit(r.normal(size=(3, 3)))
    eq = unit(r.normal(size=3))
    closer = unit(eq + step * (ep - eq))
    if closer @ ep <= eq @ ep + 1e-9:
        return

    def term(q):
        # anchor 0 is the only anchor; the other rows only act as negatives
        ei = np.stack([ep, ep, ep, ep])
        ej = np.vstack([q, neg])
        return info_nce(Tensor(ei[:1]), Tensor(ej), np.array([[0, 0], [0, 1], [0, 2], [0, 3]])).item()

    # with a single anchor the sum runs over 4 identical denominators: 4*lse - sum of logits
    ej0, ej1 = np.vstack([eq, neg]), np.vstack([closer, neg])
    t0 = np.log(np.exp(ej0 @ ep / 0.07).sum()) - eq @ ep / 0.07
    t1 = np.log(np.exp(ej1 @ ep / 0.07).sum()) - closer @ ep / 0.07
    assert t1 < t0
    lse0 = np.log(np.exp(ej0 @ ep / 0.07).sum())
    assert abs(term(eq) - (4 * lse0 - (ej0 @ ep).sum() / 0.07)) < 1e-9


def test_cross_entropy_cases():
    onehot = np.zeros((2, 2, 3))
    lab = np.array([[0, 1], [2, 255]])
    for (y, x), c in np.ndenumerate(lab):
        if c != 255:
            onehot[y, x, c] = 1.0
    assert cross_entropy(Tensor(onehot), lab).item() <= 1e-6
    uni = np.full((3, 3, 4), 0.25)
    assert abs(cross_entropy(Tensor(uni), np.zeros((3, 3), int)).item() - math.log(4)) < 1e-12
    p = np.array([[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.9, 0.1]]])
    y = np.array([[0, 0], [255, 1]])
    expect = -(math.log(0.7) + math.log(0.2) + math.log(0.1)) / 3
    assert abs(cross_entropy(Tensor(p), y).item() - expect) < 1e-12


def test_cross_entropy_errors():
    with pytest.raises(LossError):
        cross_entropy(Tensor(np.full((2, 2, 2), 0.5)), np.full((2, 2), 255))
    with pytest.raises(LossError):
        cross_entropy(Tensor(np.full((1, 1, 2), 0.5)), np.array([[2]]))


def test_cross_entropy_gradcheck_through_softmax():
    r = np.random.default_rng(3)
    logits = r.normal(size=(1, 4, 4, 3))
    y = r.integers(0, 3, size=(1, 4, 4))
    y[0, 0, 0] = 255
    assert gradcheck(lambda z: cross_entropy(ad.softmax(z), y), [logits]) <= 1e-4


def test_joint_loss_values():
    assert joint_finetune_loss(1.0, 2.0, 0.001) == pytest.approx(1.002, abs=1e-15)
    sl = Tensor(np.array(1.5))
    assert joint_finetune_loss(sl, Tensor(np.array(3.0)), 0.0) is sl
    assert joint_finetune_loss(sl, None, 0.001) is sl
    assert joint_finetune_loss(1.0, 0.0, 0.001) == 1.0
    with pytest.raises(LossError):
        joint_finetune_loss(float("nan"), 1.0, 0.001)


def test_joint_loss_gradcheck():
    r = np.random.default_rng(4)
    logits = r.normal(size=(1, 4, 4, 3))
    y = r.integers(0, 3, size=(1, 4, 4))
    ei, ej = unit(r.normal(size=(6, 4))), unit(r.normal(size=(6, 4)))
    pairs = np.array([[0, 1], [2, 3], [4, 5]])

    def f(z, a, b):
        return joint_finetune_loss(cross_entropy(ad.softmax(z), y), info_nce(a, b, pairs, 0.07), 0.001)

    assert gradcheck(f, [logits, ei, ej]) <= 1e-4


def test_joint_loss_gradcheck_through_networks():
    # full composed objective w.r.t. every parameter, f64, 8x8 inputs
    net = EmbedNet(3, 4, (2, 3, 3, 2), seed=0, dtype=np.float64)
    head = SegHead(4, 3, seed=0, dtype=np.float64)
    r = np.random.default_rng(5)
    x = r.normal(size=(2, 8, 8, 3))
    y = r.integers(0, 3, size=(1, 8, 8))
    pairs = np.array([[0, 5], [9, 17], [30, 2], [63, 40]])
    names = list(net.params) + list(head.params)
    mods = [net] * len(net.params) + [head] * len(head.params)

    def f(*ps):
        for m, k, p in zip(mods, names, ps):
            m.params[k] = p
        emb, _ = net(Tensor(x))
        e = ad.reshape(emb, (2, 64, 4))
        sl = cross_entropy(head(ad.getitem(emb, slice(0, 1))), y)
        ssl = info_nce(ad.getitem(e, 0), ad.getitem(e, 1), pairs, 0.07, "mean")
        return joint_finetune_loss(sl, ssl, 0.5)

    init = [m.params[k].data.copy() for m, k in zip(mods, names)]
    assert gradcheck(f, init) <= 1e-4


class _View:
    def __init__(self, r, h=8, w=8):
        self.rgb = r.random((h, w, 3)).astype(np.float32)
        self.normal = r.normal(size=(h, w, 3)).astype(np.float32)
        self.depth = r.random((h, w)).astype(np.float32)


def test_ssl_batch_of_one_equals_info_nce():
    r = np.random.default_rng(6)
    net = EmbedNet(7, 4, (2, 3, 3, 2), seed=1)
    vi, vj = _View(r), _View(r)
    sample = PairSample(np.array([[0, 1], [5, 9], [20, 30]]), 0)
    cfg = LossConfig(n_pairs=3)
    chans = ("rgb", "normal", "depth")
    batch = ssl_loss_over_batch(net, [(vi, vj, sample)], chans, cfg, view_input).item()
    ei, _ = net(view_input(vi, chans)[None])
    ej, _ = net(view_input(vj, chans)[None])
    single = info_nce(ei, ej, sample, cfg.tau, "mean").item()
    assert abs(batch - single) <= 1e-6
    again = ssl_loss_over_batch(net, [(vi, vj, sample)], chans, cfg, view_input).item()
    assert again == batch


def test_loss_config_validation():
    with pytest.raises(LossError):
        LossConfig(tau=0)
    with pytest.raises(LossError):
        LossConfig(lambda_reg=-1)
    with pytest.raises(LossError):
        LossConfig(n_pairs=1)
