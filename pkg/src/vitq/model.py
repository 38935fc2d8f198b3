"""ViT-style encoder with fake-quantization hooks at every matmul operand.

All forward functions accept a leading batch axis: an image batch of shape
(N, H, W, C) yields token tensors of shape (N, n+1, d) and logits (N, K).

Quantization sites are named ``<group>.x`` (left operand) and ``<group>.w``
(right operand) for every group returned by :func:`site_groups`:

    embed                      patches @ W^E
    layers.{l}.{q,k,v}         X @ W^Q, X @ W^K, X @ W^V
    layers.{l}.qk              Q @ K^T         (per head)
    layers.{l}.av              softmax(A) @ V  (per head)
    layers.{l}.o               attention output @ W^O
    layers.{l}.{fc1,fc2}       MLP linears
    head                       class token @ W_head
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .quant import QuantParams
from .tensor_core import DTYPE, ShapeError, gelu, layer_norm, softmax_rows


class MissingSiteError(KeyError):
    """Hooks were supplied but a site the forward pass needs has none."""


@dataclass(frozen=True)
class ViTConfig:
    image_height: int
    image_width: int
    channels: int
    patch_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    mlp_dim: int
    num_classes: int
    ln_eps: float = 1e-6
    # "head": 1/sqrt(d/h) per head (standard); "model": 1/sqrt(d) literally
    attention_scale: str = "head"

    def __post_init__(self):
        for name in ("image_height", "image_width", "channels", "patch_size", "embed_dim",
                     "num_layers", "num_heads", "mlp_dim", "num_classes"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be positive")
        if self.attention_scale not in ("head", "model"):
            raise ValueError("attention_scale must be 'head' or 'model'")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def score_scale(self) -> float:
        d = self.head_dim if self.attention_scale == "head" else self.embed_dim
        return 1.0 / math.sqrt(d)

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    @staticmethod
    def shapes(cfg: ViTConfig):
        d, f = cfg.embed_dim, cfg.mlp_dim
        return {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
            "ln1_gamma": (d,), "ln1_beta": (d,), "ln2_gamma": (d,), "ln2_beta": (d,),
        }


@dataclass(frozen=True)
class ViTModel:
    config: ViTConfig
    patch_embed: np.ndarray
    pos_embed: np.ndarray
    class_token: np.ndarray
    layers: tuple
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self):
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise ShapeError(f"{len(self.layers)} layers, config says {cfg.num_layers}")
        expected = self.expected_shapes()
        for name, arr in self.named_tensors().items():
            want = expected[name]
            if tuple(arr.shape) != want:
                raise ShapeError(f"{name}: shape {tuple(arr.shape)} does not match config {want}")
            if arr.dtype != DTYPE:
                raise ShapeError(f"{name}: dtype {arr.dtype}, expected float32")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")

    def expected_shapes(self):
        cfg = self.config
        d = cfg.embed_dim
        out = {
            "patch_embed": (cfg.patch_dim, d),
            "pos_embed": (cfg.seq_len, d),
            "class_token": (d,),
        }
        ref = LayerWeights.shapes(cfg)
        for i in range(cfg.num_layers):
            for k, s in ref.items():
                out[f"layers.{i}.{k}"] = s
        out["head.w"] = (d, cfg.num_classes)
        out["head.b"] = (cfg.num_classes,)
        return out

    def named_tensors(self):
        """Ordered ``name -> array`` directory (the container order)."""
        out = {
            "patch_embed": self.patch_embed,
            "pos_embed": self.pos_embed,
            "class_token": self.class_token,
        }
        for i, lw in enumerate(self.layers):
            for f in dataclasses.fields(LayerWeights):
                out[f"layers.{i}.{f.name}"] = getattr(lw, f.name)
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_tensors(cls, config: ViTConfig, tensors):
        missing = [k for k in _expected_names(config) if k not in tensors]
        if missing:
            raise ShapeError(f"missing tensors: {missing[:4]}")
        layers = []
        for i in range(config.num_layers):
            kw = {f.name: tensors[f"layers.{i}.{f.name}"] for f in dataclasses.fields(LayerWeights)}
            layers.append(LayerWeights(**kw))
        return cls(
            config=config,
            patch_embed=tensors["patch_embed"],
            pos_embed=tensors["pos_embed"],
            class_token=tensors["class_token"],
            layers=layers,
            head_w=tensors["head.w"],
            head_b=tensors["head.b"],
        )

    def get(self, name):
        return self.named_tensors()[name]

    def replace_tensors(self, updates):
        """Copy of the model with some named tensors swapped out."""
        tensors = dict(self.named_tensors())
        for k, v in updates.items():
            if k not in tensors:
                raise KeyError(k)
            tensors[k] = np.asarray(v, dtype=DTYPE)
        return ViTModel.from_tensors(self.config, tensors)

    def param_count(self) -> int:
        return int(sum(a.size for a in self.named_tensors().values()))

    def equals(self, other: "ViTModel") -> bool:
        if self.config != other.config:
            return False
        a, b = self.named_tensors(), other.named_tensors()
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
        )


def _expected_names(cfg):
    names = ["patch_embed", "pos_embed", "class_token"]
    for i in range(cfg.num_layers):
        names += [f"layers.{i}.{f.name}" for f in dataclasses.fields(LayerWeights)]
    return names + ["head.w", "head.b"]


@dataclass(frozen=True)
class SiteGroup:
    """One matrix product with its two quantized operands."""

    name: str
    kind: str  # "linear" | "qk" | "av"
    weight: str | None = None  # model tensor name of the right operand, for linear groups
    bias: str | None = None
    layer: int | None = None
    ranking: bool = False

    @property
    def x_site(self):
        return f"{self.name}.x"

    @property
    def w_site(self):
        return f"{self.name}.w"

    @property
    def module(self):
        """Mixed-precision module id ("layers.l.msa" / "layers.l.mlp") or None."""
        if self.layer is None:
            return None
        op = self.name.rsplit(".", 1)[1]
        return f"layers.{self.layer}.{'mlp' if op in ('fc1', 'fc2') else 'msa'}"


def site_groups(cfg: ViTConfig):
    """Quantized matmul groups in execution order."""
    groups = [SiteGroup("embed", "linear", weight="patch_embed")]
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        groups += [
            SiteGroup(f"{p}.q", "linear", weight=f"{p}.wq", layer=i, ranking=True),
            SiteGroup(f"{p}.k", "linear", weight=f"{p}.wk", layer=i, ranking=True),
            SiteGroup(f"{p}.v", "linear", weight=f"{p}.wv", layer=i),
            SiteGroup(f"{p}.qk", "qk", layer=i, ranking=True),
            SiteGroup(f"{p}.av", "av", layer=i),
            SiteGroup(f"{p}.o", "linear", weight=f"{p}.wo", layer=i),
            SiteGroup(f"{p}.fc1", "linear", weight=f"{p}.w1", bias=f"{p}.b1", layer=i),
            SiteGroup(f"{p}.fc2", "linear", weight=f"{p}.w2", bias=f"{p}.b2", layer=i),
        ]
    groups.append(SiteGroup("head", "linear", weight="head.w", bias="head.b"))
    return groups


def all_sites(cfg: ViTConfig):
    out = []
    for g in site_groups(cfg):
        out += [g.x_site, g.w_site]
    return out


@dataclass
class QuantHooks:
    """Site id -> QuantParams table, read-only during forward passes."""

    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.params.items():
            if not isinstance(v, QuantParams):
                raise TypeError(f"{k}: expected QuantParams, got {type(v).__name__}")

    def __getitem__(self, site):
        return self.params[site]

    def __contains__(self, site):
        return site in self.params

    def __len__(self):
        return len(self.params)

    def get(self, site, default=None):
        return self.params.get(site, default)

    def items(self):
        return self.params.items()

    def with_site(self, site, p: QuantParams) -> "QuantHooks":
        new = dict(self.params)
        new[site] = p
        return QuantHooks(new)

    def validate(self, cfg: ViTConfig, complete=True):
        known = set(all_sites(cfg))
        unknown = sorted(set(self.params) - known)
        if unknown:
            raise MissingSiteError(f"hooks name unknown sites: {unknown[:4]}")
        if complete:
            missing = [s for s in all_sites(cfg) if s not in self.params]
            if missing:
                raise MissingSiteError(f"hooks missing sites: {missing[:4]}")

    def to_json(self):
        return {k: v.to_json() for k, v in self.params.items()}

    @classmethod
    def from_json(cls, d):
        return cls({k: QuantParams.from_json(v) for k, v in d.items()})

    @classmethod
    def uniform(cls, cfg: ViTConfig, delta: float, bits: int) -> "QuantHooks":
        return cls({s: QuantParams(delta, bits) for s in all_sites(cfg)})


class _Tap:
    """Applies fake quantization at sites and optionally records operands."""

    def __init__(self, hooks, partial=False, capture=None):
        self.hooks = hooks
        self.partial = partial
        self.capture = capture

    def __call__(self, site, value):
        if self.capture is not None:
            self.capture[site] = value
        if self.hooks is None:
            return value
        p = self.hooks.get(site)
        if p is None:
            if self.partial:
                return value
            raise MissingSiteError(site)
        return kernels.quant_dequant(value, p.delta, p.bits)

    def record(self, key, value):
        if self.capture is not None:
            self.capture[key] = value


def _tap(hooks, partial, capture):
    if isinstance(hooks, _Tap):
        return hooks
    return _Tap(hooks, partial, capture)


def split_heads(x, h):
    """(..., r, d) -> (..., h, r, d/h)."""
    *lead, r, d = x.shape
    return np.swapaxes(x.reshape(*lead, r, h, d // h), -2, -3)


def merge_heads(x):
    """(..., h, r, dh) -> (..., r, h*dh)."""
    *lead, h, r, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, r, h * dh)


def image_patches(image, cfg: ViTConfig):
    """Row-major patch grid, each patch flattened (P, P, C) row-major."""
    image = np.asarray(image, dtype=DTYPE)
    want = (cfg.image_height, cfg.image_width, cfg.channels)
    if tuple(image.shape[-3:]) != want:
        raise ShapeError(f"image shape {image.shape[-3:]} does not match config {want}")
    *lead, hh, ww, c = image.shape
    p = cfg.patch_size
    x = image.reshape(*lead, hh // p, p, ww // p, p, c)
    x = np.moveaxis(x, -4, -3)  # (..., H/P, W/P, P, P, C)
    return x.reshape(*lead, (hh // p) * (ww // p), p * p * c)


def patch_embed(image, model: ViTModel, hooks=None, partial=False, capture=None):
    tap = _tap(hooks, partial, capture)
    cfg = model.config
    patches = image_patches(image, cfg)
    tokens = tap("embed.x", patches) @ tap("embed.w", model.patch_embed)
    lead = tokens.shape[:-2]
    cls = np.broadcast_to(model.class_token, (*lead, 1, cfg.embed_dim))
    return (np.concatenate([cls, tokens], axis=-2) + model.pos_embed).astype(DTYPE)


def msa_forward(x, lw: LayerWeights, cfg: ViTConfig, layer=0, hooks=None, partial=False, capture=None):
    tap = _tap(hooks, partial, capture)
    p = f"layers.{layer}"
    h = cfg.num_heads
    q = tap(f"{p}.q.x", x) @ tap(f"{p}.q.w", lw.wq)
    k = tap(f"{p}.k.x", x) @ tap(f"{p}.k.w", lw.wk)
    v = tap(f"{p}.v.x", x) @ tap(f"{p}.v.w", lw.wv)
    qs = split_heads(tap(f"{p}.qk.x", q), h)
    ks = split_heads(tap(f"{p}.qk.w", k), h)
    scores = qs @ np.swapaxes(ks, -1, -2)
    tap.record(f"{p}.scores", scores)
    probs = softmax_rows(scores * DTYPE(cfg.score_scale)).astype(DTYPE)
    tap.record(f"{p}.probs", probs)
    ctx = tap(f"{p}.av.x", probs) @ split_heads(tap(f"{p}.av.w", v), h)
    ctx = merge_heads(ctx)
    return tap(f"{p}.o.x", ctx) @ tap(f"{p}.o.w", lw.wo)


def mlp_forward(z, lw: LayerWeights, cfg: ViTConfig = None, layer=0, hooks=None, partial=False, capture=None):
    tap = _tap(hooks, partial, capture)
    p = f"layers.{layer}"
    hidden = gelu(tap(f"{p}.fc1.x", z) @ tap(f"{p}.fc1.w", lw.w1) + lw.b1)
    return tap(f"{p}.fc2.x", hidden) @ tap(f"{p}.fc2.w", lw.w2) + lw.b2


def layer_forward(x, lw: LayerWeights, cfg: ViTConfig, layer=0, hooks=None, partial=False, capture=None):
    tap = _tap(hooks, partial, capture)
    eps = cfg.ln_eps
    z = layer_norm(x + msa_forward(x, lw, cfg, layer, tap), lw.ln1_gamma, lw.ln1_beta, eps)
    out = layer_norm(z + mlp_forward(z, lw, cfg, layer, tap), lw.ln2_gamma, lw.ln2_beta, eps)
    tap.record(f"layers.{layer}.out", out)
    return out


def encode(image, model: ViTModel, hooks=None, partial=False, capture=None):
    """Token features after the last layer, shape (..., n+1, d)."""
    tap = _tap(hooks, partial, capture)
    x = patch_embed(image, model, tap)
    for i, lw in enumerate(model.layers):
        x = layer_forward(x, lw, model.config, i, tap)
    return x


def model_forward(image, model: ViTModel, hooks=None, partial=False, capture=None):
    """Logits from the class-token row through the linear head.

    With ``hooks`` given every site must be present unless ``partial`` is
    set, in which case missing sites stay full precision. ``capture``
    receives the unquantized operand at each site plus attention scores,
    attention probabilities and layer outputs.
    """
    if hooks is not None and not isinstance(hooks, _Tap) and not partial:
        hooks.validate(model.config, complete=True)
    tap = _tap(hooks, partial, capture)
    x = encode(image, model, tap)
    cls = x[..., 0, :]
    return tap("head.x", cls) @ tap("head.w", model.head_w) + model.head_b
