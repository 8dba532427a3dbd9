"""Triangle meshes, per-face labels, textures, and OBJ / label-file IO."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray = None  # (U, 2) texture coordinates
    uv_triangles: np.ndarray = None  # (T, 3) indices into uvs
    texture_path: str = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError(f"triangle index out of range for {len(v)} vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.uvs is not None:
            uv = np.ascontiguousarray(self.uvs, dtype=np.float64).reshape(-1, 2)
            ut = np.ascontiguousarray(self.uv_triangles, dtype=np.int64).reshape(-1, 3)
            if len(ut) != len(t):
                raise MeshError("uv_triangles must have one row per triangle")
            if ut.size and (ut.min() < 0 or ut.max() >= len(uv)):
                raise MeshError("uv index out of range")
            object.__setattr__(self, "uvs", uv)
            object.__setattr__(self, "uv_triangles", ut)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def has_uvs(self):
        return self.uvs is not None

    def corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def areas(self):
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def centroids(self):
        a, b, c = self.corners()
        return (a + b + c) / 3.0

    def face_normals(self):
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def with_vertices(self, vertices):
        return TriMesh(vertices, self.triangles, self.uvs, self.uv_triangles, self.texture_path)

    def validate(self, min_area=1e-12):
        if self.n_triangles == 0:
            raise MeshError("mesh has no triangles")
        bad = np.flatnonzero(self.areas() <= min_area)
        if len(bad):
            raise MeshError(f"{len(bad)} degenerate triangles (first: {bad[0]})")


@dataclass(frozen=True, eq=False)
class FaceLabels:
    """Integer part id per triangle; -1 marks an unlabeled triangle."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if lab.size and lab.max(initial=-1) >= self.n_classes:
            raise MeshError(f"label {lab.max()} >= n_classes {self.n_classes}")
        if lab.size and lab.min() < -1:
            raise MeshError("labels must be >= 0 (or -1 for unlabeled)")
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.labels)

    @property
    def complete(self):
        return bool(np.all(self.labels >= 0))


@dataclass(frozen=True, eq=False)
class Texture:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]; row 0 is the top (v = 1)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise MeshError(f"texture must be HxWx3, got {p.shape}")
        if p.min() < 0 or p.max() > 1:
            raise MeshError("texture values must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def sample(self, uv):
        """Bilinear lookup with edge clamping; uv: (..., 2) -> (..., 3)."""
        h, w = self.height, self.width
        x = np.clip(uv[..., 0] * w - 0.5, 0, w - 1)
        y = np.clip((1.0 - uv[..., 1]) * h - 0.5, 0, h - 1)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = (x - x0)[..., None]
        fy = (y - y0)[..., None]
        p = self.pixels
        top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
        bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
        return top * (1 - fy) + bot * fy

    @classmethod
    def load(cls, path):
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return cls(arr)

    def save(self, path):
        from PIL import Image

        Image.fromarray(np.round(self.pixels * 255).astype(np.uint8)).save(path)


def _face_index(tok, n, lineno, path):
    try:
        i = int(tok)
    except ValueError:
        raise MeshError(f"{path}:{lineno}: bad index {tok!r}") from None
    if i < 0:
        i = n + i + 1  # OBJ relative index
    if i < 1 or i > n:
        raise MeshError(f"{path}:{lineno}: index {tok} out of range")
    return i - 1


def parse_obj(text, path="<obj>"):
    verts, uvs, tris, uv_tris = [], [], [], []
    any_uv = True
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise MeshError(f"{path}:{lineno}: bad vertex {line!r}") from None
            if len(verts[-1]) != 3:
                raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
        elif tag == "vt":
            try:
                uv = [float(x) for x in parts[1:3]]
            except ValueError:
                raise MeshError(f"{path}:{lineno}: bad texcoord {line!r}") from None
            if len(uv) != 2:
                raise MeshError(f"{path}:{lineno}: texcoord needs 2 values")
            uvs.append(uv)
        elif tag == "f":
            if len(parts) < 4:
                raise MeshError(f"{path}:{lineno}: face needs at least 3 vertices")
            vi, ti = [], []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi.append(_face_index(fields[0], len(verts), lineno, path))
                if len(fields) > 1 and fields[1]:
                    ti.append(_face_index(fields[1], len(uvs), lineno, path))
            if len(ti) != len(vi):
                any_uv = False
            # fan triangulation
            for k in range(1, len(vi) - 1):
                tris.append([vi[0], vi[k], vi[k + 1]])
                if len(ti) == len(vi):
                    uv_tris.append([ti[0], ti[k], ti[k + 1]])
        # vn, g, o, s, usemtl, mtllib: ignored
    if not tris:
        raise MeshError(f"{path}: no faces")
    if any_uv and uvs and len(uv_tris) == len(tris):
        return TriMesh(np.array(verts), np.array(tris), np.array(uvs), np.array(uv_tris))
    return TriMesh(np.array(verts), np.array(tris))


def read_labels(path, n_classes=None):
    vals = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            s = raw.strip()
            if not s:
                continue
            try:
                vals.append(int(s))
            except ValueError:
                raise MeshError(f"{path}:{lineno}: bad label {s!r}") from None
    arr = np.array(vals, dtype=np.int64)
    if n_classes is None:
        n_classes = int(arr.max()) + 1 if arr.size else 0
    return FaceLabels(arr, n_classes)


def write_labels(path, labels):
    lab = labels.labels if isinstance(labels, FaceLabels) else np.asarray(labels)
    Path(path).write_text("".join(f"{int(x)}\n" for x in lab))


def load_mesh(path, labels_path=None, n_classes=None):
    """Read an OBJ file and an optional integer-per-line label file."""
    path = Path(path)
    mesh = parse_obj(path.read_text(), str(path))
    labels = None
    if labels_path is not None:
        labels = read_labels(labels_path, n_classes)
        if len(labels) != mesh.n_triangles:
            raise MeshError(
                f"{labels_path}: {len(labels)} labels for {mesh.n_triangles} triangles")
    return mesh, labels


def write_obj(path, mesh):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.has_uvs:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
        for (a, b, c), (ta, tb, tc) in zip((mesh.triangles + 1).tolist(), (mesh.uv_triangles + 1).tolist()):
            lines.append(f"f {a}/{ta} {b}/{tb} {c}/{tc}")
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (mesh.triangles + 1).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def normalize(mesh):
    """Center the vertex bounding box at the origin and scale max vertex norm to 1."""
    if len(mesh.vertices) == 0 or mesh.n_triangles == 0:
        raise MeshError("cannot normalize an empty mesh")
    v = mesh.vertices
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    v = v - center
    scale = np.sqrt((v * v).sum(axis=1)).max()
    if scale <= 0:
        raise MeshError("all vertices coincide")
    out = mesh.with_vertices(v / scale)
    out.validate()
    return out


def _nearest_rows(query, pool, chunk=2048):
    """Index into ``pool`` of the nearest point for each query; ties -> lowest index."""
    out = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        d = q[:, None, :] - pool[None, :, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        out[s:s + chunk] = np.argmin(d2, axis=1)  # argmin returns the first minimum
    return out


def nearest_labeled_triangle(mesh, labels, query_triangle):
    """Label of the labeled triangle whose centroid is closest to the query's."""
    lab = labels.labels if isinstance(labels, FaceLabels) else np.asarray(labels)
    known = np.flatnonzero(lab >= 0)
    if len(known) == 0:
        raise MeshError("no labeled triangles")
    cent = mesh.centroids()
    j = _nearest_rows(cent[[query_triangle]], cent[known])[0]
    return int(lab[known[j]])
