"""Pixel correspondences between two views of the same shape."""
from dataclasses import dataclass

import numba
import numpy as np

DEFAULT_EPS = 5e-3
_OFF = 1 << 20


class MatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MatchSet:
    pairs: np.ndarray  # (n, 2) pixel indices (row * W + col) into view i and view j
    eps: float

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True, eq=False)
class PairSample:
    pairs: np.ndarray  # (n, 2), rows drawn from a MatchSet
    seed: int

    def __len__(self):
        return len(self.pairs)


@numba.njit(cache=True, nogil=True)
def _cell_keys(pts, cell):
    n = pts.shape[0]
    keys = np.empty(n, np.int64)
    for i in range(n):
        cx = np.int64(np.floor(pts[i, 0] / cell)) + _OFF
        cy = np.int64(np.floor(pts[i, 1] / cell)) + _OFF
        cz = np.int64(np.floor(pts[i, 2] / cell)) + _OFF
        keys[i] = (cx * (2 * _OFF) + cy) * (2 * _OFF) + cz
    return keys


@numba.njit(cache=True, nogil=True)
def _nearest_within(query, pool, pool_keys_sorted, pool_order, eps, cell):
    """For each query point, pool index of the nearest point with d <= eps (ties -> lowest index)."""
    eps2 = eps * eps
    stride = 2 * _OFF
    out = np.full(query.shape[0], -1, np.int64)
    for i in range(query.shape[0]):
        qx, qy, qz = query[i, 0], query[i, 1], query[i, 2]
        cx = np.int64(np.floor(qx / cell)) + _OFF
        cy = np.int64(np.floor(qy / cell)) + _OFF
        cz = np.int64(np.floor(qz / cell)) + _OFF
        best = np.inf
        best_j = -1
        for ax in range(-1, 2):
            for ay in range(-1, 2):
                # the three z-neighbour cells are adjacent in key order
                key = ((cx + ax) * stride + (cy + ay)) * stride + cz
                lo = np.searchsorted(pool_keys_sorted, key - 1)
                hi = np.searchsorted(pool_keys_sorted, key + 1, side="right")
                for s in range(lo, hi):
                    j = pool_order[s]
                    dx = qx - pool[j, 0]
                    dy = qy - pool[j, 1]
                    dz = qz - pool[j, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= eps2 and (d2 < best or (d2 == best and j < best_j)):
                        best = d2
                        best_j = j
        out[i] = best_j
    return out


def _nearest(query, pool, eps):
    # cells slightly wider than eps: a point within eps is never two cells away
    cell = eps * (1 + 1e-6)
    keys = _cell_keys(pool, cell)
    order = np.argsort(keys, kind="stable")
    return _nearest_within(query, pool, keys[order], order, eps, cell)


def _foreground(view):
    idx = np.flatnonzero(view.tri_id.reshape(-1) >= 0)
    pts = np.ascontiguousarray(view.hit.reshape(-1, 3)[idx], dtype=np.float64)
    return idx, pts


def build_matches(vi, vj, eps=DEFAULT_EPS):
    """Mutual-nearest one-to-one matching of foreground hit points within ``eps``."""
    if vi.shape != vj.shape:
        raise MatchError(f"resolution mismatch: {vi.shape} vs {vj.shape}")
    if eps <= 0:
        raise MatchError("eps must be positive")
    idx_i, pi = _foreground(vi)
    idx_j, pj = _foreground(vj)
    if len(pi) == 0 or len(pj) == 0:
        return MatchSet(np.empty((0, 2), np.int64), eps)
    fwd = _nearest(pi, pj, eps)
    bwd = _nearest(pj, pi, eps)
    a = np.flatnonzero(fwd >= 0)
    keep = a[bwd[fwd[a]] == a]
    pairs = np.stack([idx_i[keep], idx_j[fwd[keep]]], axis=1)
    return MatchSet(pairs, eps)


def overlap(vi, vj, eps=DEFAULT_EPS, matches=None):
    """|M| over the smaller foreground pixel count; 0 when either view is empty."""
    if vi.shape != vj.shape:
        raise MatchError(f"resolution mismatch: {vi.shape} vs {vj.shape}")
    fi, fj = int(vi.mask.sum()), int(vj.mask.sum())
    if fi == 0 or fj == 0:
        return 0.0
    if matches is None:
        matches = build_matches(vi, vj, eps)
    return len(matches) / min(fi, fj)


def sample_positive_pairs(m, n, seed):
    """``n`` uniform draws from ``m``; without replacement whenever |m| >= n."""
    if len(m) == 0:
        raise MatchError("cannot sample from an empty match set")
    rng = np.random.default_rng(seed)
    if len(m) >= n:
        rows = rng.choice(len(m), size=n, replace=False)
    else:
        rows = rng.integers(0, len(m), size=n)
    return PairSample(m.pairs[rows], seed)


def dump_matches(path, m):
    """Raw little-endian u32 (p, q) pairs."""
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(m.pairs, dtype="<u4").tobytes())


def load_matches(path, eps=DEFAULT_EPS):
    data = np.fromfile(path, dtype="<u4").astype(np.int64)
    return MatchSet(data.reshape(-1, 2), eps)
