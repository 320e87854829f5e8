"""Retrieval evaluation: distances, ranking, CMC / mAP / mINP, case reports.

Ranking follows the Market1501 protocol: junk gallery entries are dropped
and, with the cross-camera filter on, so are gallery entries sharing both
identity and camera with the query. Ties in distance are broken by
gallery index.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data.dataset import ImageRecord
from .data.io import atomic_write
from .errors import (BadMagic, CheckpointIOError, ConfigError, DimMismatch, EmptyGallery,
                     NoTrueMatch, NoValidQueries, VersionUnsupported, ZeroVector)

FEATURE_MAGIC = b"PCDF"
FEATURE_VERSION = 1
RANKS = (1, 5, 10)


@dataclass
class FeatureStore:
    features: np.ndarray
    records: list

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.records):
            raise DimMismatch(f"{self.features.shape} features for {len(self.records)} records")

    def __len__(self):
        return len(self.records)

    @property
    def pids(self):
        return np.array([r.pid for r in self.records], dtype=np.int64)

    @property
    def camids(self):
        return np.array([r.camid for r in self.records], dtype=np.int64)

    def subset(self, idx):
        idx = list(idx)
        return FeatureStore(self.features[idx], [self.records[i] for i in idx])


@dataclass(frozen=True)
class EvalProtocol:
    metric: str = "cosine"
    cross_camera_filter: bool = True
    junk_pids: frozenset = frozenset({-1})

    def __post_init__(self):
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"metric must be 'cosine' or 'euclidean', got {self.metric!r}")


@dataclass
class EvalReport:
    rank_k: dict
    mAP: float
    mINP: float
    ap: list = field(default_factory=list)
    num_valid_queries: int = 0
    num_queries: int = 0

    def rows(self):
        out = [(f"rank_{k}", v) for k, v in sorted(self.rank_k.items())]
        return out + [("map", self.mAP), ("minp", self.mINP)]

    def to_csv(self):
        lines = ["metric,value"] + [f"{name},{value!r}" for name, value in self.rows()]
        return "\n".join(lines) + "\n"

    def to_text(self):
        lines = [f"{name:<8}{value:>10.4f}" for name, value in self.rows()]
        lines.append(f"{'queries':<8}{self.num_valid_queries:>6d}/{self.num_queries}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- distances

def _normalize_rows(x):
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if (norm == 0).any():
        raise ZeroVector("cosine distance is undefined for an all-zero feature row")
    return x / norm


def distance_matrix(queries, gallery, metric="cosine"):
    """Q×G distances: squared L2, or 1 - cosine similarity."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimMismatch(f"query {q.shape} vs gallery {g.shape}")
    if metric == "cosine":
        return 1.0 - _normalize_rows(q) @ _normalize_rows(g).T
    if metric == "euclidean":
        out = np.empty((q.shape[0], g.shape[0]))
        step = max(1, 2 ** 22 // max(1, g.size))
        for s in range(0, q.shape[0], step):
            diff = q[s:s + step, None, :] - g[None, :, :]
            out[s:s + step] = (diff * diff).sum(axis=2)
        return out
    raise ConfigError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------- ranking

def _keep_mask(q_pid, q_cam, g_pids, g_cams, protocol):
    keep = ~np.isin(g_pids, list(protocol.junk_pids))
    if protocol.cross_camera_filter:
        keep &= ~((g_pids == q_pid) & (g_cams == q_cam))
    return keep


def rank_gallery(distrow, query, g_pids, g_cams, protocol=EvalProtocol()):
    """Return (ordered gallery indices, match flags) after filtering.

    ``query`` is anything with ``pid`` and ``camid`` attributes.
    """
    distrow = np.asarray(distrow)
    g_pids, g_cams = np.asarray(g_pids), np.asarray(g_cams)
    if distrow.shape != g_pids.shape:
        raise DimMismatch(f"{distrow.shape[0]} distances for {g_pids.shape[0]} gallery entries")
    keep = _keep_mask(query.pid, query.camid, g_pids, g_cams, protocol)
    order = np.argsort(distrow, kind="stable")
    order = order[keep[order]]
    if order.size == 0:
        raise EmptyGallery("no gallery entries left after filtering")
    return order, g_pids[order] == query.pid


def cmc(ranked_matches, ks=RANKS):
    """Rank-k over queries that have at least one true match."""
    first = []
    for m in ranked_matches:
        hits = np.flatnonzero(m)
        if hits.size:
            first.append(hits[0] + 1)
    if not first:
        raise NoValidQueries("no query has a true match in the gallery")
    first = np.array(first)
    return {k: np.count_nonzero(first <= k) / first.size for k in ks}


def average_precision(ranked_matches, num_true=None):
    """AP = (1/M) Σ_j P(j) over the ranks j of the true matches."""
    m = np.asarray(ranked_matches, dtype=bool)
    pos = np.flatnonzero(m) + 1
    M = pos.size if num_true is None else int(num_true)
    if M < 1 or pos.size == 0:
        raise NoTrueMatch("average precision needs at least one true match")
    prec = np.arange(1, pos.size + 1) / pos
    return np.cumsum(prec)[-1] / M


def inverse_negative_penalty(ranked_matches):
    m = np.asarray(ranked_matches, dtype=bool)
    pos = np.flatnonzero(m) + 1
    if pos.size == 0:
        raise NoTrueMatch("INP needs at least one true match")
    return pos.size / pos[-1]


def _ranked_tables(distmat, q_pids, q_cams, g_pids, g_cams, protocol):
    order = np.argsort(distmat, axis=1, kind="stable")
    junk = np.isin(g_pids, list(protocol.junk_pids))
    same_pid = g_pids[order] == q_pids[:, None]
    keep = ~junk[order]
    if protocol.cross_camera_filter:
        keep &= ~(same_pid & (g_cams[order] == q_cams[:, None]))
    return same_pid & keep, keep


def evaluate(query, gallery, protocol=EvalProtocol(), ks=RANKS, backend=None):
    """Full CMC / mAP / mINP report for two :class:`FeatureStore` objects."""
    if len(query) == 0 or len(gallery) == 0:
        raise EmptyGallery("query and gallery stores must be nonempty")
    dist = distance_matrix(query.features, gallery.features, protocol.metric)
    matches, keep = _ranked_tables(dist, query.pids, query.camids,
                                   gallery.pids, gallery.camids, protocol)
    first, ap, inp, nmatch, nkept = kernels.rank_metrics(matches, keep, backend=backend)
    if (nkept == 0).any():
        raise EmptyGallery("a query has no gallery entries left after filtering")
    valid = nmatch > 0
    nv = int(valid.sum())
    if nv == 0:
        raise NoValidQueries("no query has a true match in the gallery")
    fv = first[valid]
    rank_k = {k: np.count_nonzero(fv <= k) / nv for k in ks}
    ap_v = ap[valid]
    return EvalReport(
        rank_k=rank_k,
        mAP=float(np.cumsum(ap_v)[-1] / nv),
        mINP=float(np.cumsum(inp[valid])[-1] / nv),
        ap=[float(a) for a in ap_v],
        num_valid_queries=nv,
        num_queries=len(query),
    )


@dataclass
class CaseRow:
    rank: int
    path: str
    similarity: float
    match: bool
    pid: int


def retrieve_case(query_feature, query_record, gallery, top_k=10, protocol=EvalProtocol()):
    """Top-k gallery rows for one query, by descending cosine similarity."""
    if top_k < 1:
        raise ConfigError("top_k must be >= 1")
    q = np.asarray(query_feature, dtype=np.float64).reshape(1, -1)
    dist = distance_matrix(q, gallery.features, "cosine")[0]
    order, matches = rank_gallery(dist, query_record, gallery.pids, gallery.camids, protocol)
    rows = []
    for r, (gi, m) in enumerate(zip(order[:top_k], matches[:top_k]), start=1):
        rec = gallery.records[gi]
        rows.append(CaseRow(r, rec.path, float(1.0 - dist[gi]), bool(m), int(rec.pid)))
    return rows


def case_csv(rows):
    buf = io.StringIO()
    buf.write("rank,path,similarity,match,pid\n")
    for row in rows:
        buf.write(f"{row.rank},{row.path},{row.similarity!r},{int(row.match)},{row.pid}\n")
    return buf.getvalue()


# ---------------------------------------------------------------- feature files

def manifest_path(path):
    return os.fspath(path) + ".manifest"


def write_features(path, store):
    """Write ``PCDF`` float32 features plus the ``<index>,<pid>,<camid>,<path>`` manifest."""
    feats = np.ascontiguousarray(store.features, dtype="<f4")
    n, d = feats.shape
    payload = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, n, d) + feats.tobytes()
    lines = "".join(f"{i},{r.pid},{r.camid},{r.path}\n" for i, r in enumerate(store.records))
    atomic_write(path, payload)
    atomic_write(manifest_path(path), lines.encode("utf-8"))


def read_features(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
        with open(manifest_path(path), encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CheckpointIOError(str(exc)) from exc
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path} is not a feature file")
    if len(buf) < 16:
        raise CheckpointIOError(f"{path} is truncated")
    version, n, d = struct.unpack("<III", buf[4:16])
    if version != FEATURE_VERSION:
        raise VersionUnsupported(f"feature file version {version}")
    if len(buf) != 16 + 4 * n * d:
        raise CheckpointIOError(f"{path} is truncated")
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=16).reshape(n, d).copy()
    records = []
    for i, line in enumerate(lines):
        idx, pid, camid, p = line.split(",", 3)
        if int(idx) != i:
            raise CheckpointIOError(f"manifest row {i} has index {idx}")
        records.append(ImageRecord(p, int(pid), int(camid)))
    if len(records) != n:
        raise CheckpointIOError(f"manifest has {len(records)} rows for {n} features")
    return FeatureStore(feats, records)
