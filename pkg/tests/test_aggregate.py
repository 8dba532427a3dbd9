import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvdecor.aggregate import aggregate_labels, fill_occluded, normalized_entropy, view_weight
from mvdecor.mesh import FaceLabels, MeshError, TriMesh

from helpers import loop_aggregate, random_scene, FakeView


def test_entropy_bounds():
    C = 5
    assert normalized_entropy(np.eye(C)[[0]]).item() == 0.0
    assert abs(normalized_entropy(np.full((1, C), 1 / C)).item() - 1) < 1e-12


def test_weight_onehot_and_uniform_exact():
    mask = np.ones((3, 3), bool)
    onehot = np.zeros((3, 3, 4))
    onehot[..., 2] = 1
    assert view_weight(onehot, mask, 20) == 1.0
    assert view_weight(np.full((3, 3, 4), 0.25), mask, 20) == 0.0
    for C in (2, 3, 5, 7, 8, 13):
        assert view_weight(np.full((4, 4, C), 1 / C), np.ones((4, 4), bool), 20) == 0.0


def test_weight_gamma_zero_and_empty():
    p = np.full((2, 2, 3), 1 / 3)
    assert view_weight(p, np.ones((2, 2), bool), 0) == 1.0
    assert view_weight(p, np.zeros((2, 2), bool), 20) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_matches_triple_loop_oracle(seed):
    views = random_scene(seed)
    lab, covered = aggregate_labels(views, 12, gamma=20)
    o_lab, _, o_cov = loop_aggregate(views, 12, 20)
    np.testing.assert_array_equal(lab.labels, o_lab)
    np.testing.assert_array_equal(covered, o_cov)


def test_gamma_zero_is_plain_sum():
    views = random_scene(3)
    lab, covered = aggregate_labels(views, 12, gamma=0)
    scores = np.zeros((12, 4))
    for v, p in views:
        fg = v.tri_id >= 0
        np.add.at(scores, v.tri_id[fg], p[fg])
    np.testing.assert_array_equal(lab.labels, np.where(covered, scores.argmax(1), -1))


def test_uniform_view_has_no_vote():
    tid = np.array([[0, 1]])
    confident = np.array([[[0.9, 0.1], [0.2, 0.8]]])
    uniform = np.full((1, 2, 2), 0.5)
    uniform_wrong = [(FakeView(tid), uniform)] * 5
    lab, _ = aggregate_labels([(FakeView(tid), confident)] + uniform_wrong, 2, gamma=20)
    np.testing.assert_array_equal(lab.labels, [0, 1])


def test_uncovered_get_minus_one_then_fill():
    v = np.array([[i, 0, 0] for i in range(8)] + [[i, 1, 0] for i in range(8)], float)
    tris = [[i, i + 1, 8 + i] for i in range(7)]
    mesh = TriMesh(v, tris)
    tid = np.array([[0, 1, 6, 6]])
    p = np.zeros((1, 4, 3))
    p[0, 0, 2] = p[0, 1, 2] = 1
    p[0, 2, 1] = p[0, 3, 1] = 1
    lab, cov = aggregate_labels([(FakeView(tid), p)], mesh, gamma=20)
    np.testing.assert_array_equal(lab.labels, [2, 2, -1, -1, -1, -1, 1])
    full = fill_occluded(mesh, lab, cov)
    np.testing.assert_array_equal(full.labels, [2, 2, 2, 2, 1, 1, 1])
    np.testing.assert_array_equal(full.labels[cov], lab.labels[cov])


def test_fill_requires_coverage():
    mesh = TriMesh(np.eye(3), [[0, 1, 2]])
    with pytest.raises(MeshError):
        fill_occluded(mesh, FaceLabels([-1], 2), np.array([False]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_fill_complete_and_preserves_visible(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 40))
    v = r.normal(size=(3 * n, 3))
    mesh = TriMesh(v, np.arange(3 * n).reshape(n, 3))
    cov = r.random(n) < 0.5
    cov[r.integers(n)] = True
    lab = np.where(cov, r.integers(0, 5, n), -1)
    out = fill_occluded(mesh, FaceLabels(lab, 5), cov)
    assert (out.labels >= 0).all()
    np.testing.assert_array_equal(out.labels[cov], lab[cov])
