"""P×K identity sampling."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from ..errors import KDegenerate, TooFewIds


@dataclass
class PKBatch:
    records: list
    pids: np.ndarray
    images: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def size(self):
        return len(self.records)


def group_by_pid(records):
    groups = defaultdict(list)
    for r in records:
        if r.pid >= 0:
            groups[r.pid].append(r)
    return {pid: sorted(rs, key=lambda r: r.path) for pid, rs in sorted(groups.items())}


def pk_sample(records, P, K, rng, require_pairs=False):
    """Draw P identities without replacement and K images of each.

    Identities with fewer than K images contribute all of them plus
    draws with replacement to fill up to K.
    """
    if require_pairs and K < 2:
        raise KDegenerate("pairwise losses need K >= 2 instances per identity")
    groups = group_by_pid(records)
    if P < 1 or K < 1:
        raise TooFewIds(f"P and K must be positive, got P={P} K={K}")
    if len(groups) < P:
        raise TooFewIds(f"need {P} identities, only {len(groups)} available")
    pids = np.array(list(groups))
    chosen = rng.choice(pids, size=P, replace=False)
    out = []
    for pid in chosen:
        rs = groups[int(pid)]
        n = len(rs)
        if n >= K:
            idx = rng.choice(n, size=K, replace=False)
        else:
            idx = np.concatenate([np.arange(n), rng.integers(0, n, K - n)])
        out.extend(rs[i] for i in idx)
    return PKBatch(out, np.array([r.pid for r in out]))
