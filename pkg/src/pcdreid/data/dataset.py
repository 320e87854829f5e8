"""Market1501-style directory layout: scanning and synthetic generation.

Layout::

    root/bounding_box_train/  root/bounding_box_test/  root/query/

with files named ``<pid>_c<camid>_<frame>.ppm``: pid zero-padded to four
digits (``-1`` marks junk/distractor images), camid >= 1, frame six digits.
"""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from ..errors import BadFilename, ConfigError, IOWriteError, MissingDir
from .io import write_ppm

log = logging.getLogger(__name__)

SUBDIRS = {"train": "bounding_box_train", "gallery": "bounding_box_test", "query": "query"}
JUNK_PID = -1
_NAME = re.compile(r"^(-1|\d{4,})_c([1-9]\d*)_(\d{6})\.ppm$")


@dataclass(frozen=True)
class ImageRecord:
    path: str
    pid: int
    camid: int
    frame: int = 0

    @property
    def is_junk(self):
        return self.pid == JUNK_PID


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    gallery: list = field(default_factory=list)
    query: list = field(default_factory=list)

    def __getitem__(self, name):
        return getattr(self, name)

    @property
    def train_pids(self):
        return sorted({r.pid for r in self.train})


def format_filename(pid, camid, frame):
    pid_s = str(pid) if pid < 0 else f"{pid:04d}"
    return f"{pid_s}_c{camid}_{frame:06d}.ppm"


def parse_filename(name):
    """Return ``(pid, camid, frame)``; raises BadFilename for anything else."""
    m = _NAME.match(name)
    if m is None:
        raise BadFilename(name)
    pid, camid, frame = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if format_filename(pid, camid, frame) != name:
        raise BadFilename(f"{name} (non-canonical)")
    return pid, camid, frame


def _scan_dir(folder):
    records = []
    for name in sorted(os.listdir(folder)):
        if not name.endswith(".ppm"):
            continue
        path = os.path.join(folder, name)
        try:
            pid, camid, frame = parse_filename(name)
        except BadFilename:
            raise BadFilename(path) from None
        records.append(ImageRecord(path, pid, camid, frame))
    return records


def scan_dataset(root):
    folders = {k: os.path.join(root, v) for k, v in SUBDIRS.items()}
    for folder in folders.values():
        if not os.path.isdir(folder):
            raise MissingDir(folder)
    train = [r for r in _scan_dir(folders["train"]) if not r.is_junk]
    gallery = _scan_dir(folders["gallery"])
    query = _scan_dir(folders["query"])
    junk_q = [r for r in query if r.is_junk]
    if junk_q:
        log.warning("dropping %d junk query images", len(junk_q))
        query = [r for r in query if not r.is_junk]
    gallery_pids = {r.pid for r in gallery}
    missing = sorted({r.pid for r in query} - gallery_pids)
    if missing:
        log.warning("query identities absent from gallery: %s", missing[:10])
    return DatasetSplit(train, gallery, query)


# ---------------------------------------------------------------- synthesis

def _signature(rng):
    return {
        "helmet": rng.uniform(0.0, 1.0, 3),
        "upper": rng.uniform(0.0, 1.0, 3),
        "lower": rng.uniform(0.0, 1.0, 3),
        "stripe": rng.uniform(0.0, 1.0, 3),
        "period": int(rng.integers(2, 5)),
    }


def _render_person(sig, h, w):
    """Clean 3×h×w figure on a mid-grey background."""
    img = np.full((3, h, w), 0.5)
    x0, x1 = int(round(0.2 * w)), int(round(0.8 * w))
    head = (int(round(0.05 * h)), int(round(0.2 * h)))
    torso = (head[1], int(round(0.55 * h)))
    legs = (torso[1], int(round(0.95 * h)))
    img[:, head[0]:head[1], x0:x1] = sig["helmet"][:, None, None]
    img[:, torso[0]:torso[1], x0:x1] = sig["upper"][:, None, None]
    rows = np.arange(torso[0], torso[1])
    stripe_rows = rows[(rows - torso[0]) % (2 * sig["period"]) < sig["period"]][::2]
    img[:, stripe_rows, x0:x1] = sig["stripe"][:, None, None]
    img[:, legs[0]:legs[1], x0:x1] = sig["lower"][:, None, None]
    return img


def signature_mean(sig, h=32, w=16):
    return _render_person(sig, h, w).mean(axis=(1, 2))


def make_signatures(rng, num_ids, h=32, w=16, min_gap=0.1, tries=200):
    """Draw identity signatures whose mean colours differ by >= min_gap
    (L∞) from every earlier identity whenever that is attainable."""
    sigs, means = [], []
    for _ in range(num_ids):
        best, best_gap = None, -1.0
        for _ in range(tries):
            sig = _signature(rng)
            mu = signature_mean(sig, h, w)
            gap = min((np.abs(mu - m).max() for m in means), default=np.inf)
            if gap > best_gap:
                best, best_gap = (sig, mu), gap
            if gap >= min_gap:
                break
        sigs.append(best[0])
        means.append(best[1])
    return sigs


def _render_view(sig, camid, rng, h, w):
    img = _render_person(sig, h, w)
    img = img + (camid - 1) * 0.04 - 0.04
    dx = int(rng.integers(-max(1, w // 10), max(1, w // 10) + 1))
    img = np.roll(img, dx, axis=2)
    img = img + rng.normal(0.0, 0.03, img.shape)
    # occluder: random rectangle covering roughly 5-20% of the frame
    oh = int(rng.integers(max(1, h // 6), max(2, h // 3) + 1))
    ow = int(rng.integers(max(1, w // 4), max(2, w // 2) + 1))
    oy = int(rng.integers(0, h - oh + 1))
    ox = int(rng.integers(0, w - ow + 1))
    img[:, oy:oy + oh, ox:ox + ow] = rng.uniform(0.0, 1.0, 3)[:, None, None]
    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed, num_ids, imgs_per_id, cams, h, w, out_dir):
    """Write a deterministic synthetic Market1501-layout dataset.

    Each identity gets one query image (camera 1); of the rest, at least
    one goes to the gallery (preferring other cameras) and the remainder
    to training. Returns the scanned :class:`DatasetSplit`.
    """
    if num_ids < 2 or imgs_per_id < 2:
        raise ConfigError("synth_dataset needs num_ids >= 2 and imgs_per_id >= 2")
    if cams < 1:
        raise ConfigError("cams must be >= 1")
    rng = np.random.default_rng(seed)
    sigs = make_signatures(rng, num_ids, h, w)
    try:
        for sub in SUBDIRS.values():
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    except OSError as exc:
        raise IOWriteError(str(exc)) from exc
    for idx, sig in enumerate(sigs):
        pid = idx + 1
        camids = [1 + (j % cams) for j in range(imgs_per_id)]
        rest = sorted(range(1, imgs_per_id), key=lambda j: (camids[j] == camids[0], j))
        n_gallery = max(1, len(rest) // 2)
        role = {0: "query"}
        role.update({j: "gallery" for j in rest[:n_gallery]})
        role.update({j: "train" for j in rest[n_gallery:]})
        for j in range(imgs_per_id):
            img = _render_view(sig, camids[j], rng, h, w)
            name = format_filename(pid, camids[j], j)
            write_ppm(os.path.join(out_dir, SUBDIRS[role[j]], name), img)
    return scan_dataset(out_dir)
