import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvdecor.evalkit import ConfusionMatrix, accumulate, class_iou, part_miou, report
from mvdecor.mesh import FaceLabels, TriMesh


def unit_tris(n):
    # n right triangles of area 0.5 each
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    return TriMesh(np.tile(v, (n, 1)), np.arange(3 * n).reshape(n, 3))


def test_miou_hand_matrix():
    cm = ConfusionMatrix(2, np.array([[3.0, 1.0], [1.0, 3.0]]))
    assert abs(part_miou(cm) - 0.6) <= 1e-9
    iou, present = class_iou(cm)
    np.testing.assert_allclose(iou, [0.6, 0.6])


def test_perfect_and_swapped():
    mesh = unit_tris(6)
    gt = FaceLabels(np.array([0, 0, 0, 1, 1, 1]), 2)
    cm = accumulate(ConfusionMatrix(2), gt, gt, mesh)
    assert part_miou(cm) == 1.0
    np.testing.assert_array_equal(cm.counts, np.diag([1.5, 1.5]))
    sw = accumulate(ConfusionMatrix(2), gt, FaceLabels(1 - gt.labels, 2), mesh)
    assert part_miou(sw) == 0.0


def test_single_triangle_off_diagonal():
    cm = accumulate(ConfusionMatrix(3), FaceLabels([0], 3), FaceLabels([1], 3), unit_tris(1))
    assert cm.counts[0, 1] == 0.5 and cm.counts.sum() == 0.5


def test_absent_classes_excluded_and_empty_raises():
    cm = ConfusionMatrix(5, np.diag([2.0, 0, 0, 1.0, 0]))
    assert part_miou(cm) == 1.0
    with pytest.raises(ValueError):
        part_miou(ConfusionMatrix(3))


def test_accumulate_brute_tally():
    r = np.random.default_rng(0)
    v = r.normal(size=(300, 3))
    mesh = TriMesh(v, np.arange(300).reshape(100, 3))
    gt, pr = r.integers(0, 4, 100), r.integers(0, 4, 100)
    cm = accumulate(ConfusionMatrix(4), FaceLabels(gt, 4), FaceLabels(pr, 4), mesh)
    ref = np.zeros((4, 4))
    areas = mesh.areas()
    for t in range(100):
        ref[gt[t], pr[t]] += areas[t]
    np.testing.assert_allclose(cm.counts, ref, rtol=1e-12)


def test_length_mismatch():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(2), FaceLabels([0, 1], 2), FaceLabels([0], 2), unit_tris(2))


def test_merge():
    a = ConfusionMatrix(2, np.array([[1.0, 0], [0, 1]]))
    b = ConfusionMatrix(2, np.array([[0, 2.0], [0, 0]]))
    np.testing.assert_array_equal((a + b).counts, [[1, 2], [0, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_miou_range_and_relabel_invariance(seed):
    r = np.random.default_rng(seed)
    n, C = 40, 5
    mesh = TriMesh(r.normal(size=(3 * n, 3)), np.arange(3 * n).reshape(n, 3))
    gt, pr = r.integers(0, C, n), r.integers(0, C, n)
    perm = r.permutation(C)
    a = part_miou(accumulate(ConfusionMatrix(C), FaceLabels(gt, C), FaceLabels(pr, C), mesh))
    b = part_miou(accumulate(ConfusionMatrix(C), FaceLabels(perm[gt], C), FaceLabels(perm[pr], C), mesh))
    assert 0 <= a <= 1
    assert abs(a - b) < 1e-12


def test_subdivision_leaves_matrix_unchanged():
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0.0]])
    whole = TriMesh(v, [[0, 1, 2]])
    mid = (v[1] + v[2]) / 2
    halves = TriMesh(np.vstack([v, mid]), [[0, 1, 3], [0, 3, 2]])
    a = accumulate(ConfusionMatrix(2), FaceLabels([1], 2), FaceLabels([0], 2), whole)
    b = accumulate(ConfusionMatrix(2), FaceLabels([1, 1], 2), FaceLabels([0, 0], 2), halves)
    np.testing.assert_allclose(a.counts, b.counts, atol=1e-6)


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_report_single_and_population_std(tmp_path):
    out = rows(report({"a": [0.5], "b": [0.4, 0.6]}, tmp_path / "r.csv"))
    assert out[0][:4] == ["category", "mean", "std", "n_runs"]
    a = next(r for r in out if r[0] == "a")
    b = next(r for r in out if r[0] == "b")
    assert float(a[1]) == 0.5 and float(a[2]) == 0
    assert float(b[1]) == 0.5 and abs(float(b[2]) - 0.1) < 1e-12
    assert out[-1][0] == "overall"
    assert (tmp_path / "r.csv").read_text() == report({"a": [0.5], "b": [0.4, 0.6]})


def test_report_skips_empty_category(caplog):
    out = rows(report({"a": [0.3], "empty": []}))
    assert [r[0] for r in out] == ["category", "a", "overall"]
    assert "empty" in caplog.text
