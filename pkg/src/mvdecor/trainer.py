"""Self-supervised pre-training, few-shot fine-tuning, and multi-view inference."""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .aggregate import aggregate_labels, fill_occluded
from .autodiff import Tensor
from .correspond import build_matches, sample_positive_pairs
from .data import DataError
from .evalkit import ConfusionMatrix, accumulate, part_miou
from .losses import cross_entropy, joint_finetune_loss, ssl_loss_over_batch
from .mesh import read_labels, write_labels
from .nn import (EmbedNet, SegHead, AdamState, adam_step, load_checkpoint, n_input_channels,
                 save_checkpoint, view_input)
from .render import render_label_map

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class FewShotProtocol:
    k: int = 2
    v: object = "all"  # int or "all"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.v != "all" and int(self.v) < 1:
            raise ValueError("v must be >= 1 or 'all'")

    @classmethod
    def parse(cls, text):
        """``k=2,v=3,seed=0``"""
        kw = {}
        for item in text.split(","):
            key, _, val = item.partition("=")
            key = key.strip()
            if key not in ("k", "v", "seed"):
                raise ValueError(f"unknown protocol field {key!r}")
            kw[key] = val.strip() if key == "v" and val.strip() == "all" else int(val)
        return cls(**kw)


def make_embed(cfg, seed=None):
    return EmbedNet(n_input_channels(cfg.channels), cfg.embed_dim, cfg.widths,
                    seed=cfg.seed if seed is None else seed)


def make_head(cfg, n_classes, seed=0):
    return SegHead(cfg.embed_dim, n_classes, seed=seed)


def _params(*mods):
    return [p for m in mods for p in m.params.values()]


def _check_finite(value, where):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at {where}")


def _write_curve(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + [f"{x:.9g}" if isinstance(x, float) else x for x in r[1:]])


def _provenance(out_dir, stage, cfg, **extra):
    d = {"stage": stage, "config_hash": cfg.digest(), "seed": cfg.seed, "version": __version__,
         "config": cfg.to_dict()}
    d.update(extra)
    (Path(out_dir) / "provenance.json").write_text(json.dumps(d, indent=2, sort_keys=True, default=list) + "\n")


class PairSampler:
    """Draws (view_i, view_j, PairSample) triples from shapes with eligible view pairs."""

    def __init__(self, dataset, sids, cfg, rng):
        self.dataset = dataset
        self.cfg = cfg
        self.rng = rng
        self.pairs = {}
        for sid in sids:
            e = dataset.eligible_pairs(sid, cfg.min_overlap)
            if len(e):
                self.pairs[sid] = e
            else:
                log.warning("shape %s has no view pair with overlap >= %.2f; skipped", sid, cfg.min_overlap)
        if not self.pairs:
            raise DataError("no shape has an eligible view pair")
        self.sids = sorted(self.pairs)

    def draw(self, n):
        replace = n > len(self.sids)
        picks = self.rng.choice(len(self.sids), size=n, replace=replace)
        out = []
        for s in picks:
            sid = self.sids[s]
            cand = self.pairs[sid]
            i, j = cand[self.rng.integers(len(cand))]
            if self.rng.random() < 0.5:
                i, j = j, i
            vi, vj = self.dataset.view(sid, int(i)), self.dataset.view(sid, int(j))
            m = build_matches(vi, vj, self.cfg.match_eps)
            sample = sample_positive_pairs(m, self.cfg.n_pairs, int(self.rng.integers(2**31)))
            out.append((vi, vj, sample))
        return out


def pretrain(dataset, cfg, out_dir, sids=None, net=None):
    """Minimise mean InfoNCE over matched pixels of overlapping view pairs.

    Returns (net, curve) where curve rows are (iteration, loss, lr).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sids = dataset.split("unlabeled") if sids is None else sids
    net = make_embed(cfg) if net is None else net
    rng = np.random.default_rng([cfg.seed, 11])
    sampler = PairSampler(dataset, sids, cfg, rng)
    loss_cfg = cfg.loss_config()
    opt = AdamState(lr=cfg.lr)
    params = _params(net)
    curve, losses = [], []
    ckpt = out / "embed.ckpt"
    for it in range(cfg.pretrain_iters):
        draws = sampler.draw(cfg.batch_size)
        net.zero_grad()
        loss = ssl_loss_over_batch(net, draws, cfg.channels, loss_cfg, view_input)
        val = loss.item()
        _check_finite(val, f"pretrain iteration {it}")
        ad.backward(loss)
        adam_step(opt, params, net.grads())
        curve.append((it, val, opt.lr))
        losses.append(val)
        n = it + 1
        w = cfg.plateau_window
        if n % w == 0 and n >= 2 * w:
            prev, cur = np.mean(losses[-2 * w:-w]), np.mean(losses[-w:])
            if prev - cur < cfg.plateau_tol * prev:
                opt.lr *= 0.5
                log.info("iteration %d: loss plateau (%.4f -> %.4f), lr -> %g", n, prev, cur, opt.lr)
        if n % cfg.checkpoint_every == 0:
            save_checkpoint([net], ckpt)
        if n % 50 == 0:
            log.info("pretrain %d/%d loss %.4f", n, cfg.pretrain_iters, np.mean(losses[-50:]))
    save_checkpoint([net], ckpt)
    _write_curve(out / "loss.csv", ["iteration", "loss", "lr"], curve)
    _provenance(out, "pretrain", cfg, shapes=list(sids))
    return net, curve


def select_few_shot(dataset, protocol):
    """Seeded choice of k labeled shapes and (optionally) v views per shape."""
    pool = dataset.split("labeled_train")
    if protocol.k > len(pool):
        raise DataError(f"k={protocol.k} exceeds {len(pool)} labeled shapes")
    rng = np.random.default_rng([protocol.seed, 1])
    shapes = sorted(pool[i] for i in rng.choice(len(pool), size=protocol.k, replace=False))
    views = {}
    for sid in shapes:
        n = dataset.n_views(sid)
        if protocol.v == "all":
            views[sid] = list(range(n))
        else:
            v = min(int(protocol.v), n)
            views[sid] = sorted(int(x) for x in rng.choice(n, size=v, replace=False))
    return shapes, views


def finetune(dataset, cfg, protocol, out_dir, init=None, unlabeled=None):
    """Joint objective: cross-entropy on labeled views + lambda * InfoNCE on unlabeled pairs.

    ``init`` is an embedding checkpoint path or None for random initialisation.
    Returns (net, head, rows) with rows (iteration, total, sl, ssl, lr).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = make_embed(cfg)
    if init is not None:
        load_checkpoint(init, [net])
    head = make_head(cfg, dataset.n_classes, seed=protocol.seed)
    shapes, views = select_few_shot(dataset, protocol)
    labels = {sid: dataset.labels(sid) for sid in shapes}
    for sid, lab in labels.items():
        if lab.labels.max() >= dataset.n_classes:
            raise DataError(f"{sid}: label id >= {dataset.n_classes}")
    pool = [(sid, i) for sid in shapes for i in views[sid]]
    if not pool:
        raise DataError("empty labeled set")
    lam = cfg.lambda_reg
    # separate streams: a lambda=0 run consumes exactly the supervised draws
    rng_sl = np.random.default_rng([protocol.seed, 2])
    sampler = None
    if lam > 0:
        sids = dataset.split("unlabeled") if unlabeled is None else unlabeled
        sampler = PairSampler(dataset, sids, cfg, np.random.default_rng([protocol.seed, 3]))
    loss_cfg = cfg.loss_config()
    opt = AdamState(lr=cfg.lr)
    params = _params(net, head)
    rows = []
    used = set()
    for it in range(cfg.finetune_iters):
        opt.lr = cfg.lr * cfg.decay_factor ** (it // cfg.decay_every)
        batch = [pool[j] for j in rng_sl.choice(len(pool), size=cfg.batch_size, replace=True)]
        used.update(batch)
        x = np.stack([view_input(dataset.view(s, i), cfg.channels) for s, i in batch])
        y = np.stack([render_label_map(labels[s], dataset.view(s, i)) for s, i in batch])
        net.zero_grad()
        head.zero_grad()
        emb, _ = net(Tensor(x))
        sl = cross_entropy(head(emb), y)
        ssl = None
        if sampler is not None:
            ssl = ssl_loss_over_batch(net, sampler.draw(cfg.ssl_batch), cfg.channels, loss_cfg, view_input)
        total = joint_finetune_loss(sl, ssl, lam)
        val = total.item()
        _check_finite(val, f"finetune iteration {it}")
        ad.backward(total)
        adam_step(opt, params, net.grads() + head.grads())
        rows.append((it, val, sl.item(), ssl.item() if ssl is not None else 0.0, opt.lr))
    save_checkpoint([net, head], out / "finetune.ckpt")
    _write_curve(out / "loss.csv", ["iteration", "loss", "sl", "ssl", "lr"], rows)
    (out / "selection.json").write_text(json.dumps(
        {"k": protocol.k, "v": protocol.v, "seed": protocol.seed, "shapes": shapes,
         "views": views, "views_used": sorted([list(b) for b in used])}, indent=2) + "\n")
    _provenance(out, "finetune", cfg, protocol={"k": protocol.k, "v": protocol.v, "seed": protocol.seed},
                init=str(init) if init else None)
    return net, head, rows


def predict_views(net, head, views, cfg):
    """Class probabilities (H, W, C) for each view, in batches, without a graph."""
    out = []
    with ad.no_grad():
        for s in range(0, len(views), cfg.infer_batch):
            chunk = views[s:s + cfg.infer_batch]
            x = np.stack([view_input(v, cfg.channels) for v in chunk])
            emb, _ = net(Tensor(x))
            out.extend(list(head(emb).data))
    return out


def segment_shape(net, head, dataset, sid, cfg):
    """Multi-view prediction, weighted fusion, then occlusion fill. Returns (labels, coverage)."""
    mesh = dataset.mesh(sid)
    views = [dataset.view(sid, i) for i in range(dataset.n_views(sid))]
    probs = predict_views(net, head, views, cfg)
    partial, covered = aggregate_labels(list(zip(views, probs)), mesh, cfg.gamma, dataset.n_classes)
    return fill_occluded(mesh, partial, covered), partial, covered


def infer(dataset, cfg, ckpt, out_dir, split="test"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = make_embed(cfg)
    head = make_head(cfg, dataset.n_classes)
    load_checkpoint(ckpt, [net, head])
    stats = {}
    for sid in dataset.split(split):
        full, _, covered = segment_shape(net, head, dataset, sid, cfg)
        write_labels(out / f"{sid}.txt", full)
        stats[sid] = float(covered.mean())
    _provenance(out, "infer", cfg, checkpoint=str(ckpt), split=split, coverage=stats)
    return stats


def evaluate(dataset, pred_dir, split="test"):
    """Area-weighted part mIoU over all shapes of a split."""
    cm = ConfusionMatrix(dataset.n_classes)
    for sid in dataset.split(split):
        p = Path(pred_dir) / f"{sid}.txt"
        if not p.exists():
            raise DataError(f"missing prediction {p}")
        accumulate(cm, dataset.labels(sid), read_labels(p, dataset.n_classes), dataset.mesh(sid))
    return part_miou(cm), cm


def correspondence_margin(net, dataset, sids, cfg, n_pairs=10, seed=0):
    """Mean cosine of matched pixel embeddings minus that of random cross-view pixel pairs."""
    rng = np.random.default_rng([seed, 5])
    sampler = PairSampler(dataset, sids, cfg, rng)
    matched, rand = [], []
    for vi, vj, sample in sampler.draw(n_pairs):
        with ad.no_grad():
            x = np.stack([view_input(vi, cfg.channels), view_input(vj, cfg.channels)])
            emb, _ = net(Tensor(x))
        ei = emb.data[0].reshape(-1, emb.shape[-1])
        ej = emb.data[1].reshape(-1, emb.shape[-1])
        p, q = sample.pairs[:, 0], sample.pairs[:, 1]
        matched.append(np.mean(np.sum(ei[p] * ej[q], axis=1)))
        fi = np.flatnonzero(vi.mask.reshape(-1))
        fj = np.flatnonzero(vj.mask.reshape(-1))
        a = fi[rng.integers(len(fi), size=len(p))]
        b = fj[rng.integers(len(fj), size=len(p))]
        rand.append(np.mean(np.sum(ei[a] * ej[b], axis=1)))
    return float(np.mean(matched)), float(np.mean(rand))
