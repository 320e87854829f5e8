"""PCDNet: triplet attention in front of a ViT encoder.

Images go through a three-branch triplet-attention gate (same shape in,
same shape out), are cut into patches, embedded, run through ``depth``
pre-norm transformer blocks, and the layer-normed class token is the
feature vector.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch
from .tensor import Tensor

BRANCHES = ("c", "h", "w")
# axis order that rotates H (resp. W) into the channel slot; each is its own inverse
_BRANCH_PERM = {"c": (0, 1, 2, 3), "h": (0, 2, 1, 3), "w": (0, 3, 2, 1)}


@dataclass(frozen=True)
class PCDNetConfig:
    image_h: int = 256
    image_w: int = 128
    patch: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    ta_kernel: int = 7
    ta_branch_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    mlp_ratio: float = 4.0
    in_chans: int = field(default=3, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "ta_branch_weights",
                           tuple(float(w) for w in self.ta_branch_weights))
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ta_kernel < 1 or self.ta_kernel % 2 == 0:
            raise ConfigError(f"ta_kernel must be odd, got {self.ta_kernel}")
        w = self.ta_branch_weights
        if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-12:
            raise ConfigError(f"ta_branch_weights must be 3 nonnegative reals summing to 1, got {w}")
        if self.depth < 1 or self.mlp_ratio <= 0:
            raise ConfigError("depth must be >= 1 and mlp_ratio > 0")

    @property
    def grid(self):
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def num_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def mlp_hidden(self):
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ta_branch_weights"] = tuple(d["ta_branch_weights"])
        return cls(**d)


class ParamSet(dict):
    """Name -> Tensor map. Learnable tensors have ``requires_grad`` set;
    batch-norm running statistics are stored alongside as plain buffers."""

    def trainable(self):
        return {k: v for k, v in self.items() if v.requires_grad}

    def buffers(self):
        return {k: v for k, v in self.items() if not v.requires_grad}

    def copy(self):
        out = ParamSet()
        for k, v in self.items():
            out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad)
        return out


def param_shapes(config):
    """Ordered name -> (shape, init kind) for a config.

    Init kinds: ``trunc`` (truncated normal), ``zeros``, ``ones``, and the
    buffer kinds ``buf_zeros`` / ``buf_ones``.
    """
    d, k, p = config.embed_dim, config.ta_kernel, config.patch
    layout = {}
    for b in BRANCHES:
        layout[f"ta.{b}.conv.weight"] = ((1, 2, k, k), "trunc")
        layout[f"ta.{b}.bn.weight"] = ((1,), "ones")
        layout[f"ta.{b}.bn.bias"] = ((1,), "zeros")
        layout[f"ta.{b}.bn.running_mean"] = ((1,), "buf_zeros")
        layout[f"ta.{b}.bn.running_var"] = ((1,), "buf_ones")
    layout["patch.weight"] = ((config.in_chans * p * p, d), "trunc")
    layout["patch.bias"] = ((d,), "zeros")
    layout["cls_token"] = ((d,), "zeros")
    layout["pos_embed"] = ((config.num_patches + 1, d), "trunc")
    hid = config.mlp_hidden
    for i in range(config.depth):
        pre = f"blocks.{i}."
        layout[pre + "norm1.weight"] = ((d,), "ones")
        layout[pre + "norm1.bias"] = ((d,), "zeros")
        layout[pre + "attn.qkv.weight"] = ((d, 3 * d), "trunc")
        layout[pre + "attn.qkv.bias"] = ((3 * d,), "zeros")
        layout[pre + "attn.proj.weight"] = ((d, d), "trunc")
        layout[pre + "attn.proj.bias"] = ((d,), "zeros")
        layout[pre + "norm2.weight"] = ((d,), "ones")
        layout[pre + "norm2.bias"] = ((d,), "zeros")
        layout[pre + "mlp.fc1.weight"] = ((d, hid), "trunc")
        layout[pre + "mlp.fc1.bias"] = ((hid,), "zeros")
        layout[pre + "mlp.fc2.weight"] = ((hid, d), "trunc")
        layout[pre + "mlp.fc2.bias"] = ((d,), "zeros")
    layout["norm.weight"] = ((d,), "ones")
    layout["norm.bias"] = ((d,), "zeros")
    return layout


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) samples redrawn until they fall within ±bound·std."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


def init_params(config, seed=0):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name, (shape, kind) in param_shapes(config).items():
        if kind == "trunc":
            data = trunc_normal(rng, shape)
        elif kind in ("ones", "buf_ones"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=not kind.startswith("buf"))
    return params


def audit_params(params, config):
    """Raise ShapeMismatch unless ``params`` holds exactly the backbone tensors of ``config``."""
    layout = param_shapes(config)
    missing = [k for k in layout if k not in params]
    if missing:
        raise ShapeMismatch(f"missing parameters: {missing[:5]}")
    for name, (shape, _) in layout.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


# ---------------------------------------------------------------- building blocks

def _linear(x, w, b):
    y = T.matmul(x, w)
    bias = T.reshape(b, (1,) * (y.ndim - 1) + (b.shape[0],))
    return T.add(y, T.expand(bias, y.shape))


def _batched(x, rank):
    if x.ndim == rank:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeMismatch(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def z_pool(x):
    """Stack the per-position channel max and channel mean: C×H×W -> 2×H×W.

    A leading batch axis is accepted and kept.
    """
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"z_pool expects C×H×W (or batched), got {x.shape}")
    ax = x.ndim - 3
    return T.concat([T.reduce_max(x, ax, keepdims=True),
                     T.reduce_mean(x, ax, keepdims=True)], axis=ax)


def triplet_attention(x, params, config, training=False, return_gates=False):
    """Three rotated spatial gates, fused by ``config.ta_branch_weights``."""
    xb, squeeze = _batched(x, 3)
    if xb.shape[1] != config.in_chans:
        raise ShapeMismatch(f"triplet_attention: {xb.shape[1]} channels, config has {config.in_chans}")
    out, gates = None, {}
    for name, weight in zip(BRANCHES, config.ta_branch_weights):
        if weight == 0.0:
            continue
        perm = _BRANCH_PERM[name]
        rot = T.permute(xb, perm) if name != "c" else xb
        pre = f"ta.{name}."
        z = T.conv2d(z_pool(rot), params[pre + "conv.weight"])
        z = T.batch_norm(z, params[pre + "bn.weight"], params[pre + "bn.bias"],
                         params[pre + "bn.running_mean"], params[pre + "bn.running_var"],
                         training=training)
        gate = T.sigmoid(z)
        gates[name] = gate
        y = T.mul(rot, T.expand(gate, rot.shape))
        if name != "c":
            y = T.permute(y, perm)
        y = T.scale(y, weight)
        out = y if out is None else T.add(out, y)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return (out, gates) if return_gates else out


def patch_embed(x, params, config):
    """B×C×H×W images -> B×(N+1)×D tokens (class token first, positions added)."""
    xb, squeeze = _batched(x, 3)
    b, c, h, w = xb.shape
    p, d = config.patch, config.embed_dim
    if (h, w) != (config.image_h, config.image_w) or c != config.in_chans:
        raise ShapeMismatch(f"image {xb.shape[1:]} does not match config "
                            f"{(config.in_chans, config.image_h, config.image_w)}")
    gh, gw = h // p, w // p
    patches = T.reshape(xb, (b, c, gh, p, gw, p))
    patches = T.permute(patches, (0, 2, 4, 1, 3, 5))
    patches = T.reshape(patches, (b, gh * gw, c * p * p))
    emb = _linear(patches, params["patch.weight"], params["patch.bias"])
    cls = T.expand(T.reshape(params["cls_token"], (1, 1, d)), (b, 1, d))
    tokens = T.concat([cls, emb], axis=1)
    pos = T.reshape(params["pos_embed"], (1, gh * gw + 1, d))
    tokens = T.add(tokens, T.expand(pos, tokens.shape))
    if squeeze:
        tokens = T.reshape(tokens, tokens.shape[1:])
    return tokens


def attention(x, params, prefix, config, return_attn=False):
    b, n, d = x.shape
    h = config.heads
    dh = d // h
    qkv = _linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = T.permute(T.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    out = _linear(ctx, params[prefix + "proj.weight"], params[prefix + "proj.bias"])
    return (out, attn) if return_attn else out


def transformer_block(tokens, params, index, config, return_attn=False):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    xb, squeeze = _batched(tokens, 2)
    if xb.shape[-1] != config.embed_dim:
        raise ShapeMismatch(f"token dim {xb.shape[-1]} != embed_dim {config.embed_dim}")
    pre = f"blocks.{index}."
    h = T.layer_norm(xb, params[pre + "norm1.weight"], params[pre + "norm1.bias"])
    a, attn = attention(h, params, pre + "attn.", config, return_attn=True)
    xb = T.add(xb, a)
    h = T.layer_norm(xb, params[pre + "norm2.weight"], params[pre + "norm2.bias"])
    h = T.gelu(_linear(h, params[pre + "mlp.fc1.weight"], params[pre + "mlp.fc1.bias"]))
    h = _linear(h, params[pre + "mlp.fc2.weight"], params[pre + "mlp.fc2.bias"])
    xb = T.add(xb, h)
    if squeeze:
        xb = T.reshape(xb, xb.shape[1:])
    return (xb, attn) if return_attn else xb


def encode(tokens, params, config):
    """Transformer blocks + final norm; returns the class-token feature B×D."""
    x = tokens
    for i in range(config.depth):
        x = transformer_block(x, params, i, config)
    x = T.layer_norm(x, params["norm.weight"], params["norm.bias"])
    return x[:, 0, :]


def forward(images, params, config, training=False):
    """B×3×H×W images -> B×D features."""
    if not isinstance(images, Tensor):
        images = Tensor(images)
    if images.ndim != 4:
        raise ShapeMismatch(f"forward expects B×C×H×W, got {images.shape}")
    x = triplet_attention(images, params, config, training=training)
    return encode(patch_embed(x, params, config), params, config)


def saliency_map(image, params, config):
    """Patch-grid heatmap of |∂‖f‖²/∂token| averaged over channels.

    Returns ``(heatmap, degenerate)``; the map is min-max scaled to [0, 1]
    and is all zeros with ``degenerate=True`` when every gradient vanishes.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    with T.no_grad():
        x = triplet_attention(Tensor(img), params, config, training=False)
        tokens = patch_embed(x, params, config)
    leaf = Tensor(tokens.data, requires_grad=True)
    feat = encode(leaf, params, config)
    T.backward(T.reduce_sum(T.mul(feat, feat)), leaves=[leaf])
    g = np.abs(leaf.grad[0, 1:, :]).mean(axis=1).reshape(config.grid)
    lo, hi = g.min(), g.max()
    if hi == 0.0:
        return np.zeros(config.grid), True
    if hi == lo:
        return np.ones(config.grid), False
    return (g - lo) / (hi - lo), False
