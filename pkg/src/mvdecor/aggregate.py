"""Entropy-weighted fusion of per-view class probabilities onto mesh triangles."""
import numpy as np

from .mesh import FaceLabels, MeshError, _nearest_rows

# roundoff guard: entropy of an exactly uniform map can land a few ulps off 1
_SNAP = 1e-12


def normalized_entropy(probs):
    """Per-pixel entropy divided by ln|C|, so values lie in [0, 1]."""
    p = np.asarray(probs, dtype=np.float64)
    C = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return -plogp.sum(axis=-1) / np.log(C)


def view_weight(probs, mask, gamma=20.0, n_classes=None):
    """(1 - mean normalized entropy over foreground) ** gamma; 0 for an empty view."""
    probs = np.asarray(probs)
    C = probs.shape[-1] if n_classes is None else n_classes
    if C < 2:
        raise ValueError("need at least two classes")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    h = normalized_entropy(probs[mask])
    base = min(1.0, max(0.0, 1.0 - float(h.mean())))
    if base <= _SNAP:
        base = 0.0
    elif base >= 1.0 - _SNAP:
        base = 1.0
    return base ** gamma


def accumulate_votes(views, n_triangles, gamma=20.0):
    """Sum of W_i * P_i(p) over pixels p hitting each triangle: (T, C) scores, coverage mask."""
    scores = None
    covered = np.zeros(n_triangles, dtype=bool)
    for view, probs in views:
        probs = np.asarray(probs, dtype=np.float64)
        C = probs.shape[-1]
        if scores is None:
            scores = np.zeros((n_triangles, C))
        fg = view.tri_id >= 0
        tid = view.tri_id[fg].astype(np.int64)
        covered[tid] = True
        w = view_weight(probs, fg, gamma, C)
        if w == 0.0:
            continue
        # unbuffered adds in pixel order: same rounding as a plain loop over pixels
        np.add.at(scores, tid, w * probs[fg])
    return scores, covered


def aggregate_labels(views, mesh, gamma=20.0, n_classes=None):
    """Per-triangle argmax of weighted votes; uncovered triangles get -1.

    ``views`` is a sequence of (ViewBuffers, probs (H, W, C)). Ties go to the
    lowest class id.
    """
    T = mesh.n_triangles if hasattr(mesh, "n_triangles") else int(mesh)
    views = list(views)
    if not views:
        C = n_classes or 1
        return FaceLabels(np.full(T, -1), C), np.zeros(T, dtype=bool)
    scores, covered = accumulate_votes(views, T, gamma)
    labels = np.where(covered, np.argmax(scores, axis=1), -1)
    return FaceLabels(labels, scores.shape[1]), covered


def fill_occluded(mesh, labels, coverage):
    """Give every uncovered triangle the label of the nearest covered one (by centroid)."""
    coverage = np.asarray(coverage, dtype=bool)
    if not coverage.any():
        raise MeshError("no covered triangles to fill from")
    lab = labels.labels.copy()
    holes = np.flatnonzero(~coverage)
    if len(holes):
        known = np.flatnonzero(coverage)
        cent = mesh.centroids()
        lab[holes] = lab[known[_nearest_rows(cent[holes], cent[known])]]
    return FaceLabels(lab, labels.n_classes)
