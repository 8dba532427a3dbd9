"""Dense InfoNCE, per-view cross-entropy, and the joint fine-tuning objective."""
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .render import IGNORE


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lambda_reg: float = 0.001
    n_pairs: int = 4096

    def __post_init__(self):
        if self.tau <= 0:
            raise LossError("tau must be positive")
        if self.lambda_reg < 0:
            raise LossError("lambda_reg must be non-negative")
        if self.n_pairs < 2:
            raise LossError("n_pairs must be >= 2 so every anchor has a negative")


def _flat(emb):
    return emb if emb.data.ndim == 2 else ad.reshape(emb, (-1, emb.shape[-1]))


def info_nce(emb_i, emb_j, sample, tau=0.07, reduction="sum", valid_i=None, valid_j=None, check=False):
    """Contrastive loss over matched pixels of two views.

    Each anchor p (view i) is scored against every second-view pixel k in the
    sample; its own match q is the positive. ``reduction`` is "sum" or "mean"
    over pairs. Pairs touching an invalid (zero-norm) embedding are dropped.
    """
    pairs = np.asarray(sample.pairs if hasattr(sample, "pairs") else sample)
    ei, ej = _flat(emb_i), _flat(emb_j)
    if valid_i is not None or valid_j is not None:
        keep = np.ones(len(pairs), bool)
        if valid_i is not None:
            keep &= np.asarray(valid_i).reshape(-1)[pairs[:, 0]]
        if valid_j is not None:
            keep &= np.asarray(valid_j).reshape(-1)[pairs[:, 1]]
        pairs = pairs[keep]
    if len(pairs) < 2:
        raise LossError(f"need at least 2 pairs, got {len(pairs)}")
    if check:
        for e, idx in ((ei, pairs[:, 0]), (ej, pairs[:, 1])):
            n = np.linalg.norm(e.data[idx], axis=1)
            if np.abs(n - 1).max() > 1e-4:
                raise LossError("embeddings must be unit norm")
    a = ad.take_rows(ei, pairs[:, 0])
    b = ad.take_rows(ej, pairs[:, 1])
    a = ad.mul(a, np.asarray(1.0 / tau, dtype=a.dtype))
    logits = ad.matmul(a, ad.transpose(b))
    pos = ad.sum(ad.mul(a, b), axis=1)
    per_pair = ad.add(ad.logsumexp(logits, axis=1), ad.neg(pos))
    if reduction == "sum":
        return ad.sum(per_pair)
    if reduction == "mean":
        return ad.mean(per_pair)
    raise LossError(f"unknown reduction {reduction!r}")


def ssl_loss_over_batch(net, draws, channels, config, view_input):
    """Mean InfoNCE (mean-reduced) over a batch of (view_i, view_j, PairSample) draws.

    All views of the batch go through ``net`` in a single forward pass.
    """
    if not draws:
        raise LossError("empty batch")
    x = np.stack([view_input(v, channels) for d in draws for v in d[:2]])
    emb, valid = net(Tensor(x.astype(net.params["conv1.weight"].dtype)))
    D = emb.shape[-1]
    flat = ad.reshape(emb, (len(x), -1, D))
    vflat = valid.reshape(len(x), -1)
    terms = []
    for k, (_, _, sample) in enumerate(draws):
        ei = _slice(flat, 2 * k)
        ej = _slice(flat, 2 * k + 1)
        terms.append(info_nce(ei, ej, sample, config.tau, "mean", vflat[2 * k], vflat[2 * k + 1]))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, np.asarray(1.0 / len(terms), dtype=total.dtype))


def _slice(x, i):
    """x[i] for a (B, P, D) tensor with a cheap backward."""
    out = x.data[i]

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return ad._node(out, (x,), fn)


def cross_entropy(probs, labels, floor=1e-12):
    """Mean of -log p[label] over pixels whose label is not IGNORE.

    probs: (..., C) tensor of class probabilities; labels: integer array (...).
    """
    lab = np.asarray(labels).reshape(-1)
    C = probs.shape[-1]
    flat = ad.reshape(probs, (-1, C))
    rows = np.flatnonzero(lab != IGNORE)
    if len(rows) == 0:
        raise LossError("every pixel is ignored")
    if lab[rows].max() >= C or lab[rows].min() < 0:
        raise LossError(f"label outside [0, {C})")
    picked = _pick(flat, rows, lab[rows])
    return ad.neg(ad.mean(ad.log(_clip_min(picked, floor))))


def _pick(x, rows, cols):
    out = x.data[rows, cols]

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, cols] = g  # (row, col) pairs are unique
        return (gx,)

    return ad._node(out, (x,), fn)


def _clip_min(x, lo):
    mask = x.data > lo
    out = np.where(mask, x.data, lo).astype(x.dtype, copy=False)
    return ad._node(out, (x,), lambda g: (g * mask,))


def joint_finetune_loss(sl, ssl, lam):
    """lam * ssl + sl; with lam == 0 the supervised term is returned untouched."""
    for name, v in (("sl", sl), ("ssl", ssl)):
        if v is None:
            continue
        val = v.data if isinstance(v, Tensor) else v
        if not np.all(np.isfinite(val)):
            raise LossError(f"{name} is not finite")
    if not math.isfinite(lam):
        raise LossError("lambda is not finite")
    if lam == 0 or ssl is None:
        return sl
    if isinstance(sl, Tensor) or isinstance(ssl, Tensor):
        sl_t = sl if isinstance(sl, Tensor) else Tensor(np.asarray(sl))
        return ad.add(sl_t, ad.mul(ssl, np.asarray(lam, dtype=sl_t.dtype)))
    return lam * ssl + sl
