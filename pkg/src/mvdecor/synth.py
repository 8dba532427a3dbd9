"""Procedural labeled shapes: composite furniture and articulated figures.

Part ids are semantic slots shared by every instance of a family, so a part
keeps its meaning (and rough position) across shapes.
"""
import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import FaceLabels, Texture, TriMesh, normalize, write_labels, write_obj

FAMILIES = ("composite-furniture", "articulated-figure")
N_CLASSES = 8
MANDATORY = {"composite-furniture": (0, 1, 2), "articulated-figure": (0, 1, 2, 3)}
PART_NAMES = {
    "composite-furniture": ("seat", "back", "legs", "arms", "stretchers", "headrest", "cushion", "footrest"),
    "articulated-figure": ("head", "torso", "arms", "legs", "hat", "belt", "shoes", "hands"),
}
_TILE_COLS, _TILE_ROWS = 4, 2


@dataclass(frozen=True)
class SynthSpec:
    family: str = "composite-furniture"
    min_parts: int = 4
    max_parts: int = 8
    texture_size: int = 256
    size_jitter: float = 0.2
    pose_jitter: float = 20.0  # degrees
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        lo = len(MANDATORY[self.family])
        if not lo <= self.min_parts <= self.max_parts <= N_CLASSES:
            raise ValueError(f"part range must satisfy {lo} <= min <= max <= {N_CLASSES}")

    @property
    def textured(self):
        return self.family == "articulated-figure"


# ---------------------------------------------------------------- primitives
# each returns (vertices, triangles, uvs) with per-vertex uv in [0, 1]^2


def _grid(nu, nv):
    tris = []
    for i in range(nv):
        for j in range(nu):
            a = i * (nu + 1) + j
            b, c, d = a + 1, a + nu + 1, a + nu + 2
            tris += [[a, b, d], [a, d, c]]
    return np.array(tris)


def box(n=2):
    faces = [  # (origin, axis u, axis v) of each unit-cube face, outward by right-hand rule
        ((-1, -1, 1), (2, 0, 0), (0, 2, 0)),
        ((1, -1, -1), (-2, 0, 0), (0, 2, 0)),
        ((1, -1, 1), (0, 0, -2), (0, 2, 0)),
        ((-1, -1, -1), (0, 0, 2), (0, 2, 0)),
        ((-1, 1, 1), (2, 0, 0), (0, 0, -2)),
        ((-1, -1, -1), (2, 0, 0), (0, 0, 2)),
    ]
    g = np.linspace(0, 1, n + 1)
    uu, vv = np.meshgrid(g, g)
    uu, vv = uu.ravel(), vv.ravel()
    V, T, UV = [], [], []
    for k, (o, a, b) in enumerate(faces):
        o, a, b = (np.array(x, float) for x in (o, a, b))
        V.append(o + uu[:, None] * a + vv[:, None] * b)
        T.append(_grid(n, n) + k * len(uu))
        UV.append(np.stack([(k + uu) / 6.0, vv], axis=1))
    return 0.5 * np.concatenate(V), np.concatenate(T), np.concatenate(UV)


def cylinder(segments=12, rings=2):
    """Unit-height cylinder of radius 1 along y, centered at the origin, capped."""
    ang = np.linspace(0, 2 * math.pi, segments + 1)
    ys = np.linspace(-0.5, 0.5, rings + 1)
    V, UV = [], []
    for y in ys:
        for a in ang:
            V.append([math.cos(a), y, -math.sin(a)])
            UV.append([a / (2 * math.pi), 0.5 + 0.5 * (y + 0.5)])
    T = [_grid(segments, rings)]
    base = len(V)
    for y, sgn in ((0.5, 1), (-0.5, -1)):
        c = len(V)
        V.append([0.0, y, 0.0])
        UV.append([0.5, 0.25])
        ring0 = len(V)
        for a in ang[:-1]:
            V.append([math.cos(a), y, -math.sin(a)])
            UV.append([0.5 + 0.25 * math.cos(a), 0.25 + 0.2 * math.sin(a)])
        for j in range(segments):
            p, q = ring0 + j, ring0 + (j + 1) % segments
            T.append(np.array([[c, p, q]] if sgn > 0 else [[c, q, p]]))
    del base
    return np.array(V), np.concatenate(T), np.array(UV)


def sphere(lat=8, lon=12):
    V, UV = [[0.0, 1.0, 0.0]], [[0.5, 1.0]]
    for i in range(1, lat):
        th = math.pi * i / lat
        for j in range(lon + 1):
            ph = 2 * math.pi * j / lon
            V.append([math.sin(th) * math.cos(ph), math.cos(th), -math.sin(th) * math.sin(ph)])
            UV.append([j / lon, 1 - i / lat])
    V.append([0.0, -1.0, 0.0])
    UV.append([0.5, 0.0])
    south = len(V) - 1
    T = []
    for j in range(lon):
        T.append([0, 1 + j, 2 + j])
    for i in range(lat - 2):
        r0 = 1 + i * (lon + 1)
        r1 = r0 + lon + 1
        for j in range(lon):
            a, b, c, d = r0 + j, r0 + j + 1, r1 + j, r1 + j + 1
            T += [[a, c, d], [a, d, b]]
    last = 1 + (lat - 2) * (lon + 1)
    for j in range(lon):
        T.append([south, last + j + 1, last + j])
    return np.array(V), np.array(T), np.array(UV)


_PRIMS = {"box": box, "cylinder": cylinder, "sphere": sphere}


def _rot(axis, deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass
class _Piece:
    prim: str
    scale: tuple
    center: tuple
    rot: np.ndarray = None


def _furniture(rng, parts, jit):
    def j(x):
        return x * (1 + rng.uniform(-jit, jit))

    w, d, hl = j(1.0), j(0.9), j(0.8)
    hb, th = j(0.9), 0.1
    P = {}
    P[0] = [_Piece("box", (w, th, d), (0, hl, 0))]
    P[1] = [_Piece("box", (w, hb, 0.08), (0, hl + th / 2 + hb / 2, -d / 2 + 0.04))]
    r = j(0.05)
    P[2] = [_Piece("cylinder", (r, hl, r), (sx * (w / 2 - r), hl / 2 - th / 2, sz * (d / 2 - r)))
            for sx in (-1, 1) for sz in (-1, 1)]
    ah = j(0.3)
    P[3] = [_Piece("box", (0.08, 0.06, d * 0.9), (sx * (w / 2 + 0.04), hl + ah, 0)) for sx in (-1, 1)]
    P[4] = [_Piece("cylinder", (r * 0.8, d - 2 * r, r * 0.8), (sx * (w / 2 - r), hl * 0.3, 0), _rot("x", 90))
            for sx in (-1, 1)]
    P[5] = [_Piece("sphere", (w * 0.35, 0.12, 0.1), (0, hl + th / 2 + hb + 0.08, -d / 2 + 0.04))]
    P[6] = [_Piece("box", (w * 0.85, 0.08, d * 0.8), (0, hl + th / 2 + 0.04, 0.04))]
    P[7] = [_Piece("box", (w * 0.8, 0.06, 0.15), (0, 0.15, d / 2 + 0.2))]
    return {k: P[k] for k in parts}


def _figure(rng, parts, jit, pose):
    def j(x):
        return x * (1 + rng.uniform(-jit, jit))

    tw, th, tdp = j(0.5), j(0.7), j(0.28)
    ll, al = j(0.8), j(0.65)
    hr = j(0.17)
    hip = ll
    P = {}
    P[1] = [_Piece("box", (tw, th, tdp), (0, hip + th / 2, 0))]
    P[0] = [_Piece("sphere", (hr, hr * 1.1, hr), (0, hip + th + hr * 1.1 + 0.02, 0))]
    arms, hands = [], []
    for s in (-1, 1):
        a = s * (15 + rng.uniform(-pose, pose))
        R = _rot("z", a)
        top = np.array([s * (tw / 2 + 0.07), hip + th - 0.05, 0])
        axis = R @ np.array([0, -1.0, 0])
        arms.append(_Piece("cylinder", (0.06, al, 0.06), tuple(top + axis * al / 2), R))
        hands.append(_Piece("sphere", (0.07, 0.07, 0.07), tuple(top + axis * (al + 0.05))))
    P[2] = arms
    legs, shoes = [], []
    for s in (-1, 1):
        a = s * (3 + rng.uniform(0, pose / 2))
        R = _rot("z", a)
        top = np.array([s * tw / 4, hip, 0])
        axis = R @ np.array([0, -1.0, 0])
        legs.append(_Piece("cylinder", (0.08, ll, 0.08), tuple(top + axis * ll / 2), R))
        foot = top + axis * ll
        shoes.append(_Piece("box", (0.14, 0.08, 0.26), (foot[0], foot[1] - 0.02, 0.05)))
    P[3] = legs
    P[4] = [_Piece("cylinder", (hr * 0.9, 0.16, hr * 0.9), (0, hip + th + 2 * hr * 1.1 + 0.06, 0))]
    P[5] = [_Piece("box", (tw + 0.04, 0.1, tdp + 0.04), (0, hip + 0.08, 0))]
    P[6] = shoes
    P[7] = hands
    return {k: P[k] for k in parts}


def _texture(spec, rng):
    S = spec.texture_size
    tw, tht = S // _TILE_COLS, S // _TILE_ROWS
    img = np.zeros((S, S, 3))
    yy, xx = np.mgrid[0:tht, 0:tw]
    for c in range(N_CLASSES):
        hue = (c / N_CLASSES + rng.uniform(-0.03, 0.03)) % 1.0
        base = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.9))
        alt = np.array(colorsys.hsv_to_rgb(hue, 0.35, 0.45))
        pattern = c % 3
        period = 8 + 4 * (c % 2)
        if pattern == 0:  # checker
            sel = ((xx // period) + (yy // period)) % 2 == 0
        elif pattern == 1:  # stripes
            sel = (yy // period) % 2 == 0
        else:
            sel = np.ones_like(xx, dtype=bool)
        tile = np.where(sel[..., None], base, alt)
        r, col = divmod(c, _TILE_COLS)
        img[r * tht:(r + 1) * tht, col * tw:(col + 1) * tw] = tile
    return Texture(np.clip(img, 0, 1))


def _tile_uv(uv, c, margin=0.02):
    r, col = divmod(c, _TILE_COLS)
    u = (col + margin + uv[:, 0] * (1 - 2 * margin)) / _TILE_COLS
    # texture row 0 is v = 1
    v = 1 - (r + margin + (1 - uv[:, 1]) * (1 - 2 * margin)) / _TILE_ROWS
    return np.stack([u, v], axis=1)


def generate_shape(spec, seed):
    """Build one labeled, textured, normalized shape; deterministic in ``seed``."""
    rng = np.random.default_rng([seed, FAMILIES.index(spec.family)])
    mand = MANDATORY[spec.family]
    n_parts = int(rng.integers(spec.min_parts, spec.max_parts + 1))
    optional = [c for c in range(N_CLASSES) if c not in mand]
    extra = rng.choice(optional, size=n_parts - len(mand), replace=False)
    parts = sorted(set(mand) | {int(x) for x in extra})
    if spec.family == "composite-furniture":
        pieces = _furniture(rng, parts, spec.size_jitter)
    else:
        pieces = _figure(rng, parts, spec.size_jitter, spec.pose_jitter)
    yaw = _rot("y", rng.uniform(-spec.pose_jitter, spec.pose_jitter))
    texture = _texture(spec, rng)
    V, T, UV, L = [], [], [], []
    nv = 0
    for c in parts:
        for pc in pieces[c]:
            pv, pt, puv = _PRIMS[pc.prim]()
            pv = pv * np.asarray(pc.scale)
            if pc.rot is not None:
                pv = pv @ pc.rot.T
            pv = (pv + np.asarray(pc.center)) @ yaw.T
            V.append(pv)
            T.append(pt + nv)
            UV.append(_tile_uv(puv, c))
            L.append(np.full(len(pt), c))
            nv += len(pv)
    tris = np.concatenate(T)
    mesh = TriMesh(np.concatenate(V), tris, np.concatenate(UV), tris.copy())
    return normalize(mesh), FaceLabels(np.concatenate(L), N_CLASSES), texture


SPLITS = ("unlabeled", "labeled_train", "test")


def generate_dataset(spec, n_shapes, split, seed, out_dir):
    """Write shapes plus a ``manifest.json`` describing the split."""
    if sum(split) != n_shapes:
        raise ValueError(f"split {split} does not sum to {n_shapes}")
    out = Path(out_dir)
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    base = [int(s.generate_state(1)[0]) for s in ss.spawn(n_shapes)]
    manifest = {"family": spec.family, "n_classes": N_CLASSES, "textured": spec.textured,
                "part_names": list(PART_NAMES[spec.family]), "seed": seed,
                "splits": {k: [] for k in SPLITS}, "shapes": {}}
    idx = 0
    for split_name, count in zip(SPLITS, split):
        for _ in range(count):
            sid = f"shape_{idx:03d}"
            s = base[idx]
            tries = 0
            while True:
                mesh, labels, tex = generate_shape(spec, s + tries)
                # labeled shapes must exhibit every part of the family
                if split_name != "labeled_train" or len(np.unique(labels.labels)) == N_CLASSES:
                    break
                tries += 1
            d = out / "shapes" / sid
            d.mkdir(exist_ok=True)
            write_obj(d / "mesh.obj", mesh)
            write_labels(d / "labels.txt", labels)
            tex.save(d / "texture.png")
            manifest["splits"][split_name].append(sid)
            manifest["shapes"][sid] = {"seed": s + tries, "parts": sorted(int(x) for x in np.unique(labels.labels))}
            idx += 1
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
