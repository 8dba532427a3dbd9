import json

import numpy as np
import pytest

from mvdecor.mesh import load_mesh, read_labels
from mvdecor.synth import FAMILIES, N_CLASSES, SynthSpec, generate_dataset, generate_shape


@pytest.mark.parametrize("family", FAMILIES)
def test_shape_is_labeled_and_normalized(family):
    for seed in range(5):
        mesh, lab, tex = generate_shape(SynthSpec(family), seed)
        assert len(lab) == mesh.n_triangles
        assert lab.labels.min() >= 0 and lab.labels.max() < N_CLASSES
        lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
        np.testing.assert_allclose((lo + hi) / 2, 0, atol=1e-6)
        assert abs(np.linalg.norm(mesh.vertices, axis=1).max() - 1) < 1e-6
        assert (mesh.areas() > 0).all()


def test_seeds_differ_and_repeat():
    a = generate_shape(SynthSpec(), 1)[0]
    b = generate_shape(SynthSpec(), 1)[0]
    c = generate_shape(SynthSpec(), 2)[0]
    np.testing.assert_array_equal(a.vertices, b.vertices)
    assert a.vertices.shape != c.vertices.shape or not np.allclose(a.vertices, c.vertices)


def test_part_range_validation():
    with pytest.raises(ValueError):
        SynthSpec(min_parts=2)
    with pytest.raises(ValueError):
        SynthSpec(max_parts=9)
    with pytest.raises(ValueError):
        SynthSpec("teapots")


def test_dataset_layout(tmp_path):
    man = generate_dataset(SynthSpec(texture_size=32), 12, (6, 3, 3), 4, tmp_path)
    disk = json.loads((tmp_path / "manifest.json").read_text())
    assert disk == man
    assert [len(man["splits"][k]) for k in ("unlabeled", "labeled_train", "test")] == [6, 3, 3]
    dirs = sorted(p.name for p in (tmp_path / "shapes").iterdir())
    assert len(dirs) == 12 and dirs == sorted(man["shapes"])
    for sid in man["splits"]["labeled_train"]:
        assert man["shapes"][sid]["parts"] == list(range(N_CLASSES))
    for sid in dirs:
        mesh, _ = load_mesh(tmp_path / "shapes" / sid / "mesh.obj")
        lab = read_labels(tmp_path / "shapes" / sid / "labels.txt", N_CLASSES)
        assert len(lab) == mesh.n_triangles and (lab.labels >= 0).all()


def test_dataset_split_must_sum(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(SynthSpec(), 5, (2, 2, 2), 0, tmp_path)


def test_dataset_deterministic_and_seed_sensitive(tmp_path):
    a = generate_dataset(SynthSpec(texture_size=16), 4, (2, 1, 1), 0, tmp_path / "a")
    b = generate_dataset(SynthSpec(texture_size=16), 4, (2, 1, 1), 0, tmp_path / "b")
    generate_dataset(SynthSpec(texture_size=16), 4, (2, 1, 1), 1, tmp_path / "c")
    assert a == b
    assert (tmp_path / "a/shapes/shape_000/mesh.obj").read_bytes() == (tmp_path / "b/shapes/shape_000/mesh.obj").read_bytes()
    assert (tmp_path / "a/shapes/shape_000/mesh.obj").read_bytes() != (tmp_path / "c/shapes/shape_000/mesh.obj").read_bytes()
