"""On-disk dataset layout: manifest, per-shape meshes, and rendered view caches.

    root/manifest.json
    root/shapes/<sid>/mesh.obj, labels.txt, texture.png
    root/shapes/<sid>/views/view_000.mvdc (+ .png), cameras.json, overlap.npy, provenance.json

With MVDECOR_CACHE set (or ``cache=`` given), view caches live under
``<cache>/<hash of root>/<sid>/`` instead.
"""
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .bvh import build_bvh
from .correspond import build_matches, dump_matches, overlap
from .mesh import Texture, load_mesh, read_labels
from .render import Camera, read_view, render_view, sample_views, write_view

log = logging.getLogger(__name__)

VIEW_KEYS = ("n_views", "radius", "angle_jitter", "scale_jitter", "closeup_fraction",
             "closeup_distance", "fov", "image_size", "view_seed", "match_eps")


CACHE_ENV = "MVDECOR_CACHE"


class DataError(Exception):
    pass


def _view_fingerprint(cfg, textured):
    d = {k: getattr(cfg, k) for k in VIEW_KEYS}
    d["textured"] = bool(textured)
    d["version"] = __version__
    return d


def overlap_table(views, eps):
    n = len(views)
    table = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            table[i, j] = table[j, i] = overlap(views[i], views[j], eps)
    return table


def render_shape(mesh_path, out_dir, cfg, texture_path=None, dump_matches_min=None):
    """Render every sampled view of one mesh into ``out_dir``; reuses a matching cache."""
    out = Path(out_dir)
    textured = texture_path is not None
    prov_path = out / "provenance.json"
    fp = _view_fingerprint(cfg, textured)
    if prov_path.exists() and (out / "overlap.npy").exists():
        try:
            if json.loads(prov_path.read_text()).get("views") == fp:
                return False
        except json.JSONDecodeError:
            pass
    out.mkdir(parents=True, exist_ok=True)
    mesh, _ = load_mesh(mesh_path)
    texture = Texture.load(texture_path) if textured else None
    bvh = build_bvh(mesh)
    cams = sample_views(cfg.view_config(), mesh)
    views = []
    for i, cam in enumerate(cams):
        v = render_view(mesh, texture, cam, bvh)
        write_view(out / f"view_{i:03d}.mvdc", v)
        views.append(v)
    (out / "cameras.json").write_text(json.dumps([c.to_dict() for c in cams], indent=1) + "\n")
    table = overlap_table(views, cfg.match_eps)
    np.save(out / "overlap.npy", table)
    if dump_matches_min is not None:
        mdir = out / "matches"
        mdir.mkdir(exist_ok=True)
        for i in range(len(views)):
            for j in range(i + 1, len(views)):
                if table[i, j] >= dump_matches_min:
                    dump_matches(mdir / f"{i:03d}_{j:03d}.bin", build_matches(views[i], views[j], cfg.match_eps))
    prov_path.write_text(json.dumps({"stage": "render", "views": fp, "config_hash": cfg.digest(),
                                     "mesh": str(mesh_path)}, indent=2, sort_keys=True) + "\n")
    return True


class Dataset:
    """Read access to a synthesized dataset and its rendered view caches."""

    def __init__(self, root, cache=None):
        self.root = Path(root)
        cache = cache if cache is not None else os.environ.get(CACHE_ENV)
        self.cache = Path(cache) if cache else None
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise DataError(f"{mpath} not found")
        self.manifest = json.loads(mpath.read_text())
        self.n_classes = int(self.manifest["n_classes"])
        self.textured = bool(self.manifest.get("textured", False))
        self.family = self.manifest.get("family", "shapes")
        self._view = lru_cache(maxsize=512)(self._read_view)
        self._mesh = lru_cache(maxsize=64)(self._read_mesh)

    def split(self, name):
        try:
            return list(self.manifest["splits"][name])
        except KeyError:
            raise DataError(f"no split {name!r} in manifest") from None

    def shape_dir(self, sid):
        return self.root / "shapes" / sid

    def view_dir(self, sid):
        if self.cache is not None:
            key = hashlib.sha256(str(self.root.resolve()).encode()).hexdigest()[:12]
            return self.cache / key / sid
        return self.shape_dir(sid) / "views"

    def _read_mesh(self, sid):
        d = self.shape_dir(sid)
        return load_mesh(d / "mesh.obj")[0]

    def mesh(self, sid):
        return self._mesh(sid)

    def labels(self, sid):
        lab = read_labels(self.shape_dir(sid) / "labels.txt", self.n_classes)
        if len(lab) != self.mesh(sid).n_triangles:
            raise DataError(f"{sid}: label count does not match mesh")
        return lab

    def render(self, cfg, sids=None, threads=1, dump_matches_min=None):
        sids = sorted(self.manifest["shapes"]) if sids is None else sids

        def one(sid):
            d = self.shape_dir(sid)
            tex = d / "texture.png" if self.textured else None
            return render_shape(d / "mesh.obj", self.view_dir(sid), cfg, tex, dump_matches_min)

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                done = list(ex.map(one, sids))
        else:
            done = [one(s) for s in sids]
        self._view.cache_clear()
        return sum(done)

    def n_views(self, sid):
        return len(self.cameras(sid))

    def cameras(self, sid):
        p = self.view_dir(sid) / "cameras.json"
        if not p.exists():
            raise DataError(f"{sid}: views not rendered ({p} missing)")
        return [Camera.from_dict(c) for c in json.loads(p.read_text())]

    def _read_view(self, sid, i):
        p = self.view_dir(sid) / f"view_{i:03d}.mvdc"
        if not p.exists():
            raise DataError(f"missing view cache {p}")
        return read_view(p)

    def view(self, sid, i):
        return self._view(sid, i)

    def overlap(self, sid):
        p = self.view_dir(sid) / "overlap.npy"
        if not p.exists():
            raise DataError(f"{sid}: overlap table missing")
        return np.load(p)

    def eligible_pairs(self, sid, min_overlap):
        return eligible_pairs(self.overlap(sid), min_overlap)


def eligible_pairs(table, min_overlap=0.15):
    """View index pairs (i < j) whose overlap reaches ``min_overlap``."""
    t = np.asarray(table)
    i, j = np.nonzero(np.triu(t >= min_overlap, k=1))
    return np.stack([i, j], axis=1)
