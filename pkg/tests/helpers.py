"""Oracles shared by the test modules."""
import numpy as np

from mvdecor import autodiff as ad
from mvdecor.autodiff import Tensor


def gradcheck(f, arrays, h=1e-5, floor=1e-6):
    """Max element-wise relative error between backprop and central differences.

    ``f`` maps Tensors (float64, requires_grad) to a scalar Tensor. The error
    of an element is |a - n| / max(|a|, |n|, floor).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*ts)
    ad.backward(out)
    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = np.zeros_like(a) if ts[k].grad is None else ts[k].grad
        num = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(*[Tensor(x) for x in arrays]).item()
            flat[i] = old - h
            fm = f(*[Tensor(x) for x in arrays]).item()
            flat[i] = old
            num.reshape(-1)[i] = (fp - fm) / (2 * h)
        den = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - num) / den)))
    return worst


def brute_matches(vi, vj, eps):
    """O(P^2) mutual nearest neighbours with d <= eps; ties to the lowest pixel index."""
    fi = np.flatnonzero(vi.tri_id.reshape(-1) >= 0)
    fj = np.flatnonzero(vj.tri_id.reshape(-1) >= 0)
    if len(fi) == 0 or len(fj) == 0:
        return np.empty((0, 2), np.int64)
    pi = vi.hit.reshape(-1, 3)[fi].astype(np.float64)
    pj = vj.hit.reshape(-1, 3)[fj].astype(np.float64)
    d = pi[:, None, :] - pj[None, :, :]
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    ok = d2 <= eps * eps
    big = np.where(ok, d2, np.inf)
    fwd = np.where(ok.any(1), np.argmin(big, axis=1), -1)
    bwd = np.where(ok.any(0), np.argmin(big, axis=0), -1)
    out = [(fi[a], fj[b]) for a, b in enumerate(fwd) if b >= 0 and bwd[b] == a]
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def loop_aggregate(views, n_tri, gamma):
    """Triple loop (view, pixel, class) over W * P with the entropy weight written out."""
    scores = np.zeros((n_tri, views[0][1].shape[-1]))
    covered = np.zeros(n_tri, bool)
    for view, probs in views:
        H, W, C = probs.shape
        hs = []
        for y in range(H):
            for x in range(W):
                if view.tri_id[y, x] < 0:
                    continue
                h = 0.0
                for c in range(C):
                    p = float(probs[y, x, c])
                    if p > 0:
                        h -= p * np.log(p)
                hs.append(h / np.log(C))
        w = 0.0
        if hs:
            base = 1.0 - float(np.mean(hs))
            base = min(1.0, max(0.0, base))
            base = 0.0 if base <= 1e-12 else (1.0 if base >= 1 - 1e-12 else base)
            w = base ** gamma
        for y in range(H):
            for x in range(W):
                t = view.tri_id[y, x]
                if t < 0:
                    continue
                covered[t] = True
                if w == 0.0:
                    continue
                for c in range(C):
                    scores[t, c] += w * float(probs[y, x, c])
    labels = np.where(covered, np.argmax(scores, axis=1), -1)
    return labels, scores, covered


def prim_mesh(prim, *args):
    from mvdecor.mesh import TriMesh

    v, t, uv = prim(*args)
    return TriMesh(v, t, uv, t.copy())


class FakeView:
    def __init__(self, tri_id):
        self.tri_id = np.asarray(tri_id, dtype=np.int32)


def random_scene(seed, n_tri=12, n_views=3, C=4, hw=(5, 6)):
    r = np.random.default_rng(seed)
    views = []
    for _ in range(n_views):
        tid = r.integers(-1, n_tri, size=hw)
        sharp = r.uniform(0.5, 8)
        logits = r.normal(scale=sharp, size=(*hw, C))
        p = np.exp(logits - logits.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        views.append((FakeView(tid), p))
    return views
