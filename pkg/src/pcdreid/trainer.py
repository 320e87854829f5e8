"""Training loop, feature extraction and checkpoint files.

Checkpoint layout (little-endian)::

    b"PCDN" | u32 version | u32 len + UTF-8 "key=value" lines
    | u32 count | tensors... | u32 count | optimizer tensors...

where each tensor is ``u16 name length, name, u8 rank, u32 dims..., f64 data``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import losses as LS
from . import model as M
from . import tensor as T
from .data.augment import AugmentConfig, augment, image_rng
from .data.io import atomic_write, read_ppm, resize
from .data.sampler import pk_sample
from .errors import BadMagic, CheckpointIOError, ConfigError, VersionUnsupported
from .evaluation import FeatureStore
from .optim import SGD, Adam, clip_grad_norm, cosine_lr
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PCDN"
CKPT_VERSION = 1
LOG_HEADER = "epoch,lr,ce,triplet,circle,cosface,total"


def tiny_model_config(**kw):
    """Desk-scale architecture: depth 2, width 32, 4 heads, 8-pixel patches on 32×16 images."""
    base = dict(image_h=32, image_w=16, patch=8, embed_dim=32, depth=2, heads=4)
    base.update(kw)
    return M.PCDNetConfig(**base)


@dataclass
class TrainConfig:
    epochs: int = 120
    lr0: float = 0.008
    lr_min: float = 0.0
    optimizer: str = "sgd"
    sgd_momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    P: int = 4
    K: int = 2
    seed: int = 0
    grad_clip: float | None = 1.0
    weights: LS.LossWeights = field(default_factory=LS.LossWeights)
    loss: dict = field(default_factory=dict)
    model: M.PCDNetConfig = field(default_factory=M.PCDNetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self, check_instances=True):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr0 > self.lr_min >= 0:
            raise ConfigError("need lr0 > lr_min >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive (or None to disable)")
        if self.P < 1 or self.K < 1:
            raise ConfigError("P and K must be positive")
        if check_instances and self.K < 2 and self.weights.pairwise:
            raise ConfigError(
                "K_DEGENERATE: K=1 puts every identity in a batch exactly once, so the "
                "triplet/circle/cosface terms have no positive pairs and silently stay at "
                "zero; set K (instances per identity) to 2 or more")

    def to_flat(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("weights", "model", "augment"):
                for k, v in asdict(val).items():
                    out[f"{f.name}.{k}"] = v
            elif f.name == "loss":
                for k, v in sorted(val.items()):
                    out[f"loss.{k}"] = v
            else:
                out[f"train.{f.name}"] = val
        return out

    @classmethod
    def from_flat(cls, flat):
        groups = {"train": {}, "weights": {}, "model": {}, "augment": {}, "loss": {}}
        for key, val in flat.items():
            head, _, name = key.partition(".")
            if head in groups:
                groups[head][name] = tuple(val) if isinstance(val, list) else val
        kw = dict(groups["train"])
        kw["weights"] = LS.LossWeights(**groups["weights"])
        kw["model"] = M.PCDNetConfig.from_dict(groups["model"])
        kw["augment"] = AugmentConfig(**groups["augment"])
        kw["loss"] = groups["loss"]
        return cls(**kw)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: M.ParamSet
    opt_state: dict
    epoch: int
    rng_state: dict
    class_pids: list
    scalars: dict = field(default_factory=dict)


# ---------------------------------------------------------------- heads

def init_heads(params, num_classes, dim, seed):
    rng = np.random.default_rng([int(seed), 1])
    params["classifier.weight"] = Tensor(M.trunc_normal(rng, (dim, num_classes)), requires_grad=True)
    params["classifier.bias"] = Tensor(np.zeros(num_classes), requires_grad=True)
    # cosface normalises these rows; unit-norm rows keep its gradient from
    # being inflated by 1/|w| at the start of training
    cw = rng.standard_normal((num_classes, dim))
    cw /= np.linalg.norm(cw, axis=1, keepdims=True)
    params["cosface.weight"] = Tensor(cw, requires_grad=True)
    return params


def classifier_logits(features, params):
    return M._linear(features, params["classifier.weight"], params["classifier.bias"])


# ---------------------------------------------------------------- data helpers

def load_image(path, h, w):
    return resize(read_ppm(path), h, w)


def build_image_cache(records, config):
    return {r.path: load_image(r.path, config.image_h, config.image_w) for r in records}


def extract_features(params, config, records, batch_size=32, cache=None):
    """Eval-mode features for ``records`` in the given order."""
    feats = []
    with T.no_grad():
        for s in range(0, len(records), batch_size):
            chunk = records[s:s + batch_size]
            imgs = np.stack([cache[r.path] if cache is not None and r.path in cache
                             else load_image(r.path, config.image_h, config.image_w)
                             for r in chunk])
            feats.append(M.forward(imgs, params, config, training=False).data)
    dim = config.embed_dim
    matrix = np.concatenate(feats) if feats else np.zeros((0, dim))
    return FeatureStore(matrix, list(records))


# ---------------------------------------------------------------- training

def _fmt(v):
    return "skipped" if v is None else repr(float(v))


def format_loss_log(rows):
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(",".join([str(r["epoch"]), repr(r["lr"])] +
                              [_fmt(r[k]) for k in ("ce", "triplet", "circle", "cosface", "total")]))
    return "\n".join(lines) + "\n"


def _epoch_mean(values):
    vals = [v for v in values if v is not None]
    if len(vals) != len(values) or not vals:
        return None
    return float(np.cumsum(vals)[-1] / len(vals))


def batch_loss(params, images, labels, config, loss_cfg):
    """Training-mode forward plus joint loss for one batch; returns ``(total, report)``."""
    feats = M.forward(images, params, config.model, training=True)
    logits = classifier_logits(feats, params)
    return LS.joint_loss(feats, labels, config.weights, loss_cfg,
                         logits=logits, class_weights=params["cosface.weight"])


def train(config, split, check_instances=True, progress=None):
    """Train PCDNet on ``split.train``; returns ``(checkpoint, loss_log_rows)``.

    ``check_instances=False`` skips the K >= 2 guard so the downstream
    loss errors can be observed directly.
    """
    config.validate(check_instances=check_instances)
    train_recs = [r for r in split.train if r.pid >= 0]
    class_pids = sorted({r.pid for r in train_recs})
    if len(class_pids) < 2:
        raise ConfigError("training needs at least two identities")
    label_of = {pid: i for i, pid in enumerate(class_pids)}
    mcfg = config.model
    loss_cfg = LS.LossConfig(num_classes=len(class_pids), **config.loss)

    params = M.init_params(mcfg, config.seed)
    init_heads(params, len(class_pids), mcfg.embed_dim, config.seed)
    trainable = params.trainable()
    if config.optimizer == "sgd":
        opt = SGD(trainable, config.sgd_momentum)
    else:
        opt = Adam(trainable, config.adam_betas, config.adam_eps)

    cache = build_image_cache(train_recs, mcfg)
    pool = [cache[r.path] for r in train_recs]
    rng = np.random.default_rng(config.seed)
    batch_size = config.P * config.K
    n_batches = math.ceil(len(train_recs) / batch_size)
    rows, counter = [], 0
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        terms = {k: [] for k in LS.TERMS + ("total",)}
        for _ in range(n_batches):
            batch = pk_sample(train_recs, config.P, config.K, rng)
            imgs = []
            for r in batch.records:
                imgs.append(augment(cache[r.path], config.augment,
                                    image_rng(config.seed, counter), pool=pool))
                counter += 1
            labels = np.array([label_of[p] for p in batch.pids], dtype=np.int64)
            total, report = batch_loss(params, np.stack(imgs), labels, config, loss_cfg)
            T.backward(total, leaves=list(trainable.values()))
            if config.grad_clip is not None:
                clip_grad_norm(trainable.values(), config.grad_clip)
            opt.step(lr)
            for k in terms:
                terms[k].append(report[k])
        row = {"epoch": epoch + 1, "lr": lr}
        row.update({k: _epoch_mean(v) for k, v in terms.items()})
        rows.append(row)
        log.info("epoch %d lr %.6g total %.6f", epoch + 1, lr, row["total"])
        if progress is not None:
            progress(row)

    scalars = {"adam_t": opt.t} if isinstance(opt, Adam) else {}
    ckpt = Checkpoint(config, params, dict(opt.state_tensors()), config.epochs,
                      rng.bit_generator.state, class_pids, scalars)
    return ckpt, rows


# ---------------------------------------------------------------- checkpoint I/O

def _pack_tensors(named):
    parts = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt):
    meta = {f"config.{k}": v for k, v in ckpt.config.to_flat().items()}
    meta["epoch"] = ckpt.epoch
    meta["rng_state"] = ckpt.rng_state
    meta["class_pids"] = list(ckpt.class_pids)
    meta["buffers"] = sorted(k for k, t in ckpt.params.items() if not t.requires_grad)
    for k, v in sorted(ckpt.scalars.items()):
        meta[f"scalar.{k}"] = v
    text = "".join(f"{k}={json.dumps(v, sort_keys=True)}\n" for k, v in meta.items())
    block = text.encode("utf-8")
    return b"".join([
        CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(block)), block,
        _pack_tensors({k: t.data for k, t in ckpt.params.items()}),
        _pack_tensors(ckpt.opt_state),
    ])


def save_checkpoint(ckpt, path):
    atomic_write(path, encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointIOError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I")
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        return out


def decode_checkpoint(buf):
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise BadMagic("not a PCDN checkpoint")
    rd = _Reader(buf)
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version}")
    (blen,) = rd.unpack("<I")
    try:
        meta = {}
        for line in rd.take(blen).decode("utf-8").splitlines():
            key, _, val = line.partition("=")
            meta[key] = json.loads(val)
        config = TrainConfig.from_flat({k[len("config."):]: v for k, v in meta.items()
                                        if k.startswith("config.")})
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointIOError(f"corrupt config block: {exc}") from exc
    raw = rd.tensors()
    opt_state = rd.tensors()
    if rd.pos != len(buf):
        raise CheckpointIOError("trailing bytes after checkpoint payload")
    buffers = set(meta.get("buffers", []))
    params = M.ParamSet()
    for name, arr in raw.items():
        params[name] = Tensor(arr, requires_grad=name not in buffers)
    scalars = {k[len("scalar."):]: v for k, v in meta.items() if k.startswith("scalar.")}
    return Checkpoint(config, params, opt_state, int(meta["epoch"]), meta["rng_state"],
                      list(meta["class_pids"]), scalars)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointIOError(str(exc)) from exc
    return decode_checkpoint(buf)
