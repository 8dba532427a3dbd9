"""Flat ``key = value`` pipeline configuration."""
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .losses import LossConfig
from .render import ViewSamplingConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # views
    n_views: int = 32
    radius: float = 2.0
    angle_jitter: float = 10.0
    scale_jitter: float = 0.1
    closeup_fraction: float = 0.1
    closeup_distance: float = 0.8
    fov: float = 60.0
    image_size: int = 128
    view_seed: int = 0
    # correspondence
    match_eps: float = 0.01
    min_overlap: float = 0.15
    # losses
    tau: float = 0.07
    lambda_reg: float = 0.001
    n_pairs: int = 4096
    # networks
    embed_dim: int = 16
    widths: tuple = (32, 64, 64, 32)
    channels: tuple = ("rgb", "normal", "depth")
    # optimisation
    lr: float = 0.001
    batch_size: int = 8
    ssl_batch: int = 2
    pretrain_iters: int = 2000
    finetune_iters: int = 400
    plateau_window: int = 200
    plateau_tol: float = 0.01
    decay_factor: float = 0.99
    decay_every: int = 40
    checkpoint_every: int = 500
    seed: int = 0
    # inference / protocol
    gamma: float = 20.0
    infer_batch: int = 8
    k: int = 2
    v: str = "all"
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        for name in ("n_views", "image_size", "embed_dim", "batch_size", "ssl_batch", "infer_batch",
                     "plateau_window", "decay_every", "checkpoint_every", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("pretrain_iters", "finetune_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.image_size % 2:
            raise ConfigError("image_size must be even")
        if len(self.widths) != 4:
            raise ConfigError("widths needs 4 comma-separated values")
        if self.v != "all":
            try:
                if int(self.v) < 1:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"v must be 'all' or a positive integer, got {self.v!r}") from None
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        try:
            self.view_config()
            self.loss_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def view_config(self):
        return ViewSamplingConfig(
            n_views=self.n_views, radius=self.radius, angle_jitter=self.angle_jitter,
            scale_jitter=self.scale_jitter, closeup_fraction=self.closeup_fraction,
            closeup_distance=self.closeup_distance, fov=self.fov, image_size=self.image_size,
            seed=self.view_seed)

    def loss_config(self):
        return LossConfig(tau=self.tau, lambda_reg=self.lambda_reg, n_pairs=self.n_pairs)

    @property
    def n_views_labeled(self):
        return None if self.v == "all" else int(self.v)

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}
_DEFAULTS = PipelineConfig()


def _coerce(key, raw):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_overrides(pairs):
    out = {}
    for key, raw in pairs:
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def parse_text(text, source="<config>"):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=()):
    pairs = []
    if path is not None:
        with open(path) as f:
            pairs = parse_text(f.read(), str(path))
    values = parse_overrides(list(pairs) + list(overrides))
    return PipelineConfig(**values)


def describe_defaults():
    return "\n".join(f"  {k} = {_fmt(v)}" for k, v in _DEFAULTS.to_dict().items())
