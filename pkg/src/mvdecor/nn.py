"""Pixel-embedding network, segmentation head, Adam, and checkpoint files."""
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHANNEL_WIDTHS = {"rgb": 3, "normal": 3, "depth": 1}
CKPT_MAGIC = b"MVDCKPT1"


class CheckpointError(Exception):
    pass


def n_input_channels(channels):
    try:
        return sum(CHANNEL_WIDTHS[c] for c in channels)
    except KeyError as e:
        raise ValueError(f"unknown channel {e.args[0]!r}; choose from {sorted(CHANNEL_WIDTHS)}") from None


class Module:
    """Ordered collection of named parameter tensors."""

    def __init__(self):
        self.params = {}

    def _param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        """Gradients in parameter order; never-reached parameters get zeros."""
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params.values()]

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if k not in self.params:
                raise CheckpointError(f"unexpected tensor {k!r}")
            if self.params[k].shape != v.shape:
                raise CheckpointError(
                    f"shape mismatch for {k!r}: checkpoint {v.shape}, model {self.params[k].shape}")
        missing = set(self.params) - set(state)
        if missing:
            raise CheckpointError(f"missing tensors: {sorted(missing)}")
        for k, v in state.items():
            self.params[k].data = v.astype(self.params[k].dtype, copy=True)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class EmbedNet(Module):
    """conv3x3 -> relu -> conv3x3/2 -> relu -> conv3x3 -> relu -> up2 -> conv3x3 -> relu -> conv3x3.

    Output is L2-normalized per pixel. Spatial size is preserved for even H, W.
    """

    def __init__(self, in_channels=7, dim=16, widths=(32, 64, 64, 32), seed=0, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.dim = dim
        self.widths = tuple(widths)
        c1, c2, c3, c4 = self.widths
        rng = np.random.default_rng(seed)
        spec = [("conv1", in_channels, c1), ("conv2", c1, c2), ("conv3", c2, c3),
                ("conv4", c3, c4), ("conv5", c4, dim)]
        for name, cin, cout in spec:
            self._param(f"{name}.weight", _he_uniform(rng, (3, 3, cin, cout), 9 * cin, dtype))
            self._param(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def raw(self, x):
        p = self.params
        h = ad.relu(ad.conv2d(x, p["conv1.weight"], p["conv1.bias"]))
        h = ad.relu(ad.conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=2))
        h = ad.relu(ad.conv2d(h, p["conv3.weight"], p["conv3.bias"]))
        h = ad.upsample2x(h)
        h = ad.relu(ad.conv2d(h, p["conv4.weight"], p["conv4.bias"]))
        return ad.conv2d(h, p["conv5.weight"], p["conv5.bias"])

    def __call__(self, x):
        """x: (N, H, W, K) -> (unit embeddings (N, H, W, D), valid mask (N, H, W))."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[-1] != self.in_channels:
            raise ValueError(f"channel mismatch: input has {x.shape[-1]}, net expects {self.in_channels}")
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ValueError(f"spatial dims must be even, got {x.shape[1:3]}")
        return ad.l2_normalize(self.raw(x), axis=-1)


class SegHead(Module):
    """1x1 convolution to class logits followed by a softmax."""

    def __init__(self, dim=16, n_classes=8, seed=0, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.n_classes = n_classes
        rng = np.random.default_rng(seed + 7919)
        self._param("head.weight", _he_uniform(rng, (1, 1, dim, n_classes), dim, dtype))
        self._param("head.bias", np.zeros(n_classes, dtype=dtype))

    def __call__(self, emb):
        logits = ad.conv2d(emb, self.params["head.weight"], self.params["head.bias"])
        return ad.softmax(logits, axis=-1)


def view_input(view, channels):
    """Stack the selected buffers of a view into an (H, W, K) float32 array."""
    parts = []
    for c in channels:
        if c == "rgb":
            parts.append(view.rgb)
        elif c == "normal":
            parts.append(view.normal)
        elif c == "depth":
            parts.append(view.depth[..., None])
        else:
            raise ValueError(f"unknown channel {c!r}")
    return np.concatenate(parts, axis=-1).astype(np.float32)


def forward_embed(net, view, channels=("rgb", "normal", "depth")):
    """Embed one view; returns (H, W, D) embedding tensor and validity mask."""
    x = view_input(view, channels)
    if x.shape[-1] != net.in_channels:
        raise ValueError(f"channel mismatch: selection gives {x.shape[-1]}, net expects {net.in_channels}")
    emb, valid = net(Tensor(x[None].astype(net.params["conv1.weight"].dtype)))
    return ad.reshape(emb, emb.shape[1:]), valid[0]


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_step(state, params, grads):
    """In-place Adam update with bias correction. ``params`` are Tensors."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {p.name} {p.shape}")
    if state.m is None:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
    return params


def save_checkpoint(modules, path):
    """Write named float32 tensors of all modules; atomic via temp + rename."""
    records = []
    for mod in modules:
        for name, t in mod.params.items():
            records.append((name, t.data))
    names = [r[0] for r in records]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names across modules")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(records)))
        for name, data in records:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse a checkpoint fully into memory; returns {name: float32 array}."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        (nd,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{nd}I", take(4 * nd))
        size = int(np.prod(dims)) if nd else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def load_checkpoint(path, modules):
    """Load tensors into ``modules``; nothing is modified unless every tensor fits."""
    state = read_checkpoint(path)
    by_module = []
    for mod in modules:
        part = {k: v for k, v in state.items() if k in mod.params}
        for k in mod.params:
            if k not in state:
                raise CheckpointError(f"{path}: missing tensor {k!r}")
            if state[k].shape != mod.params[k].shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {k!r}: file {state[k].shape}, model {mod.params[k].shape}")
        by_module.append(part)
    known = set().union(*(m.params for m in modules))
    extra = set(state) - known
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    for mod, part in zip(modules, by_module):
        mod.load_state(part)
    return modules
