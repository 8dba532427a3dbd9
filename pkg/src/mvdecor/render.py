"""Camera sampling and ray-traced multi-channel views."""
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bvh import build_bvh, intersect

IGNORE = 255
VIEW_MAGIC = b"MVDC1"
_UP = np.array([0.0, 1.0, 0.0])


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov: float = 60.0  # vertical, degrees
    size: tuple = (128, 128)  # (H, W)

    def __post_init__(self):
        pos = np.asarray(self.position, float)
        tgt = np.asarray(self.look_at, float)
        if np.allclose(pos, tgt):
            raise RenderError("camera position equals look-at point")
        if not 1.0 < self.fov < 120.0:
            raise RenderError(f"fov {self.fov} outside (1, 120) degrees")
        if self.size[0] < 8 or self.size[1] < 8:
            raise RenderError(f"image size {self.size} below 8x8")
        object.__setattr__(self, "position", tuple(float(x) for x in pos))
        object.__setattr__(self, "look_at", tuple(float(x) for x in tgt))
        object.__setattr__(self, "up", tuple(float(x) for x in self.up))
        object.__setattr__(self, "fov", float(self.fov))
        object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))

    def basis(self):
        f = np.subtract(self.look_at, self.position)
        f /= np.linalg.norm(f)
        up = np.asarray(self.up, float)
        if abs(np.dot(f, up)) > 0.999:
            up = np.array([0.0, 0.0, 1.0])
        r = np.cross(f, up)
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return f, r, u

    def rays(self):
        """Per-pixel (origins, unit directions), row-major, pixel centers."""
        H, W = self.size
        f, r, u = self.basis()
        th = math.tan(math.radians(self.fov) / 2)
        xs = ((np.arange(W) + 0.5) / W * 2 - 1) * th * (W / H)
        ys = (1 - (np.arange(H) + 0.5) / H * 2) * th
        d = f[None, None] + xs[None, :, None] * r[None, None] + ys[:, None, None] * u[None, None]
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position), d.shape)
        return np.ascontiguousarray(o), d

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["position"]), tuple(d["look_at"]), tuple(d["up"]), d["fov"], tuple(d["size"]))


@dataclass(frozen=True)
class ViewSamplingConfig:
    n_views: int = 90
    radius: float = 2.0
    angle_jitter: float = 10.0  # degrees, uniform +-
    scale_jitter: float = 0.1  # relative fov jitter, uniform +-
    closeup_fraction: float = 0.1
    closeup_distance: float = 0.8
    fov: float = 60.0
    image_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 1:
            raise RenderError("n_views must be >= 1")
        if not 0.0 <= self.closeup_fraction <= 1.0:
            raise RenderError("closeup_fraction must lie in [0, 1]")

    @property
    def n_closeup(self):
        return math.ceil(round(self.closeup_fraction * self.n_views, 9))


@dataclass(eq=False)
class ViewBuffers:
    rgb: np.ndarray  # (H, W, 3) float32
    normal: np.ndarray  # (H, W, 3) float32, world space, toward camera
    depth: np.ndarray  # (H, W) float32
    tri_id: np.ndarray  # (H, W) int32, -1 background
    hit: np.ndarray  # (H, W, 3) float32 world-space hit points
    camera: Camera = None

    @property
    def mask(self):
        return self.tri_id >= 0

    @property
    def shape(self):
        return self.tri_id.shape


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    y = 1 - 2 * i / n
    r = np.sqrt(np.maximum(0.0, 1 - y * y))
    phi = i * math.pi * (3 - math.sqrt(5))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def sample_surface(mesh, n, rng):
    """Area-weighted uniform surface points and their triangle ids."""
    areas = mesh.areas()
    tri = rng.choice(mesh.n_triangles, size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (x[tri] for x in mesh.corners())
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, tri


def sample_views(config, mesh=None):
    """Jittered Fibonacci-lattice cameras plus close-up cameras aimed at the surface."""
    rng = np.random.default_rng(config.seed)
    n_close = config.n_closeup
    n_far = config.n_views - n_close
    size = (config.image_size, config.image_size)
    cams = []
    for d in fibonacci_sphere(n_far):
        az = math.atan2(d[2], d[0])
        el = math.asin(max(-1.0, min(1.0, d[1])))
        jit = np.radians(rng.uniform(-config.angle_jitter, config.angle_jitter, size=2))
        az += jit[0]
        el = max(-math.pi / 2 + 1e-3, min(math.pi / 2 - 1e-3, el + jit[1]))
        pos = config.radius * np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
        fov = config.fov * (1 + rng.uniform(-config.scale_jitter, config.scale_jitter))
        cams.append(Camera(tuple(pos), (0.0, 0.0, 0.0), tuple(_UP), fov, size))
    if n_close:
        if mesh is None:
            raise RenderError("close-up views need the mesh to pick surface targets")
        pts, tri = sample_surface(mesh, n_close, rng)
        normals = mesh.face_normals()[tri]
        for p, nrm in zip(pts, normals):
            out = p / np.linalg.norm(p) if np.linalg.norm(p) > 1e-6 else nrm
            fov = config.fov * (1 + rng.uniform(-config.scale_jitter, config.scale_jitter))
            cams.append(Camera(tuple(p + config.closeup_distance * out), tuple(p), tuple(_UP), fov, size))
    return cams


def render_view(mesh, texture, camera, bvh=None):
    """Ray trace one view: one primary ray through each pixel center."""
    if bvh is None:
        bvh = build_bvh(mesh)
    H, W = camera.size
    o, d = camera.rays()
    tid, t, u, v = intersect(bvh, o, d)
    fg = tid >= 0
    n = H * W
    rgb = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    depth = np.zeros(n)
    hit = np.zeros((n, 3))
    if fg.any():
        ids = tid[fg]
        uu, vv = u[fg], v[fg]
        w0 = 1.0 - uu - vv
        a, b, c = (x[ids] for x in mesh.corners())
        hit[fg] = w0[:, None] * a + uu[:, None] * b + vv[:, None] * c
        nrm = mesh.face_normals()[ids]
        dd = d[fg]
        facing = np.sum(nrm * dd, axis=1)
        nrm = np.where((facing > 0)[:, None], -nrm, nrm)
        normal[fg] = nrm
        if texture is not None and mesh.has_uvs:
            uvt = mesh.uv_triangles[ids]
            uv = w0[:, None] * mesh.uvs[uvt[:, 0]] + uu[:, None] * mesh.uvs[uvt[:, 1]] + vv[:, None] * mesh.uvs[uvt[:, 2]]
            rgb[fg] = texture.sample(uv)
        else:
            rgb[fg] = (0.7 * np.abs(facing))[:, None]
        f, _, _ = camera.basis()
        z = (hit[fg] - np.asarray(camera.position)) @ f
        lo, hi = z.min(), z.max()
        if hi - lo > 1e-9 * max(1.0, abs(hi)):
            depth[fg] = (z - lo) / (hi - lo)
    return ViewBuffers(
        rgb=rgb.reshape(H, W, 3).astype(np.float32),
        normal=normal.reshape(H, W, 3).astype(np.float32),
        depth=depth.reshape(H, W).astype(np.float32),
        tri_id=tid.reshape(H, W).astype(np.int32),
        hit=hit.reshape(H, W, 3).astype(np.float32),
        camera=camera,
    )


def render_label_map(labels, view):
    """Per-pixel class ids from triangle labels; IGNORE on background."""
    lab = labels.labels if hasattr(labels, "labels") else np.asarray(labels)
    tid = view.tri_id
    fg = tid >= 0
    if fg.any() and tid[fg].max() >= len(lab):
        raise RenderError(f"tri_id {tid[fg].max()} beyond {len(lab)} labels")
    out = np.full(tid.shape, IGNORE, dtype=np.int64)
    vals = lab[tid[fg]]
    if (vals < 0).any():
        raise RenderError("view references an unlabeled triangle")
    out[fg] = vals
    return out


# ---------------------------------------------------------------- view cache

_CHANNELS = (("rgb", 3), ("normal", 3), ("depth", 1), ("hit", 3))


def encode_view(view):
    H, W = view.shape
    names = ",".join(f"{n}:{c}" for n, c in _CHANNELS).encode()
    parts = [VIEW_MAGIC, struct.pack("<IIH", H, W, len(names)), names]
    for name, _ in _CHANNELS:
        parts.append(np.ascontiguousarray(getattr(view, name), dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(view.tri_id, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_view(buf, camera=None):
    if buf[:5] != VIEW_MAGIC:
        raise RenderError("bad view record magic")
    H, W, ln = struct.unpack_from("<IIH", buf, 5)
    pos = 5 + 10
    chans = []
    for item in buf[pos:pos + ln].decode().split(","):
        name, c = item.split(":")
        chans.append((name, int(c)))
    pos += ln
    arrays = {}
    for name, c in chans:
        size = H * W * c * 4
        if pos + size > len(buf):
            raise RenderError("truncated view record")
        a = np.frombuffer(buf, dtype="<f4", count=H * W * c, offset=pos).astype(np.float32)
        arrays[name] = a.reshape((H, W, c) if c > 1 else (H, W))
        pos += size
    if pos + H * W * 4 != len(buf):
        raise RenderError("view record size mismatch")
    tid = np.frombuffer(buf, dtype="<i4", count=H * W, offset=pos).astype(np.int32).reshape(H, W)
    return ViewBuffers(arrays["rgb"], arrays["normal"], arrays["depth"], tid, arrays["hit"], camera)


def write_view(path, view, preview=True):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_view(view))
    tmp.replace(path)
    if preview:
        from PIL import Image

        Image.fromarray(np.round(np.clip(view.rgb, 0, 1) * 255).astype(np.uint8)).save(path.with_suffix(".png"))


def read_view(path, camera=None):
    return decode_view(Path(path).read_bytes(), camera)
