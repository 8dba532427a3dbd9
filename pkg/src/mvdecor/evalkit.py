"""Area-weighted part mIoU and multi-run CSV reports."""
import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    n_classes: int
    counts: np.ndarray = None  # rows: ground truth, cols: prediction

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes))

    def __add__(self, other):
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)


def accumulate(cm, gt, pred, mesh):
    """Add each triangle's surface area at cm[gt, pred]."""
    g = np.asarray(getattr(gt, "labels", gt))
    p = np.asarray(getattr(pred, "labels", pred))
    if len(g) != len(p) or len(g) != mesh.n_triangles:
        raise ValueError(f"length mismatch: gt {len(g)}, pred {len(p)}, mesh {mesh.n_triangles}")
    np.add.at(cm.counts, (g, p), mesh.areas())
    return cm


def class_iou(cm):
    c = cm.counts
    tp = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - tp
    present = (c.sum(axis=1) > 0) | (c.sum(axis=0) > 0)
    iou = np.where(present, tp / np.where(union > 0, union, 1), np.nan)
    return iou, present


def part_miou(cm):
    """Mean IoU over classes present in ground truth or prediction."""
    iou, present = class_iou(cm)
    if not present.any():
        raise ValueError("confusion matrix is empty")
    return float(iou[present].mean())


def report(runs, path=None):
    """Per-category mean and population std over seeds, plus an overall row.

    ``runs`` maps category -> list of per-seed mIoU values.
    """
    rows = []
    n_seeds = max((len(v) for v in runs.values()), default=0)
    for cat in sorted(runs):
        vals = list(runs[cat])
        if not vals:
            log.warning("category %s has no runs; omitted from report", cat)
            continue
        a = np.asarray(vals, dtype=np.float64)
        rows.append((cat, a.mean(), a.std(), vals))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "mean", "std", "n_runs"] + [f"seed_{i}" for i in range(n_seeds)])
    for cat, m, s, vals in rows:
        w.writerow([cat, f"{m:.6f}", f"{s:.6f}", len(vals)] + [f"{v:.6f}" for v in vals]
                   + [""] * (n_seeds - len(vals)))
    if rows:
        means = np.array([r[1] for r in rows])
        w.writerow(["overall", f"{means.mean():.6f}", f"{means.std():.6f}", len(rows)] + [""] * n_seeds)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text
