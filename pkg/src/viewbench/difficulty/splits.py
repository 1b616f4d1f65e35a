"""Difficulty-aware test splits and bucket-balanced training samples."""
from __future__ import annotations

from collections import defaultdict

import numpy as np


def _buckets(annotations) -> dict[int, list[str]]:
    out = defaultdict(list)
    for a in annotations:
        out[int(a.d_plan)].append(a.object_id)
    return {k: sorted(v) for k, v in out.items()}


def largest_remainder(weights, total: int, caps=None) -> list[int]:
    """Integer apportionment of `total` proportional to `weights`, optionally capped per entry."""
    w = np.asarray(weights, dtype=np.float64)
    caps = np.full(len(w), np.iinfo(np.int64).max) if caps is None else np.asarray(caps, dtype=np.int64)
    alloc = np.zeros(len(w), dtype=np.int64)
    remaining = int(min(total, caps.sum()))
    while remaining > 0:
        open_ = alloc < caps
        ww = np.where(open_, w, 0.0)
        if ww.sum() <= 0:
            ww = open_.astype(np.float64)
        share = ww / ww.sum() * remaining
        base = np.minimum(np.floor(share).astype(np.int64), caps - alloc)
        rem = remaining - int(base.sum())
        frac = np.where(open_ & (alloc + base < caps), share - np.floor(share), -1.0)
        # largest fractional parts first, lower position on ties
        for i in sorted(range(len(w)), key=lambda i: (-frac[i], i))[:rem]:
            if frac[i] >= 0:
                base[i] += 1
        if base.sum() == 0:
            break
        alloc += base
        remaining -= int(base.sum())
    return alloc.tolist()


def stratified_test_split(annotations, quota: int, seed: int = 0) -> tuple[list[str], list[str]]:
    """Cover every non-empty d_plan bucket first, then fill proportionally to bucket frequency."""
    if quota <= 0:
        raise ValueError("quota must be positive")
    annotations = list(annotations)
    if quota > len(annotations):
        raise ValueError("quota exceeds the pool size")
    rng = np.random.default_rng(seed)
    buckets = _buckets(annotations)
    keys = sorted(buckets, key=lambda k: (-len(buckets[k]), k))
    pools = {k: list(rng.permutation(buckets[k])) for k in keys}
    chosen = {k: [] for k in keys}
    left = quota
    for k in keys:
        if left == 0:
            break
        chosen[k].append(pools[k].pop(0))
        left -= 1
    if left:
        extra = largest_remainder([len(buckets[k]) for k in keys], left, [len(pools[k]) for k in keys])
        for k, n in zip(keys, extra):
            chosen[k] += pools[k][:n]
    test = sorted(i for k in keys for i in chosen[k])
    picked = set(test)
    train = sorted(a.object_id for a in annotations if a.object_id not in picked)
    return test, train


def bucket_of(value: float, edges) -> int:
    """Index i with edges[i] <= value < edges[i+1], or -1 outside all buckets."""
    for i in range(len(edges) - 1):
        if edges[i] <= value < edges[i + 1]:
            return i
    return -1


def balanced_train_sample(annotations, size: int, edges, seed: int = 0) -> list[str]:
    """Equal per-bucket quotas over d_plan bucket edges; underflow goes to the largest remaining buckets."""
    if size <= 0:
        raise ValueError("size must be positive")
    annotations = list(annotations)
    if size > len(annotations):
        raise ValueError("size exceeds the pool size")
    rng = np.random.default_rng(seed)
    n_b = len(edges) - 1
    members = [[] for _ in range(n_b)]
    for a in annotations:
        b = bucket_of(a.d_plan, edges)
        if b >= 0:
            members[b].append(a.object_id)
    members = [list(rng.permutation(sorted(m))) for m in members]
    avail = np.array([len(m) for m in members])
    if size > avail.sum():
        raise ValueError("size exceeds the number of bucketed objects")
    quota = np.full(n_b, size // n_b)
    quota[: size % n_b] += 1
    take = np.minimum(quota, avail)
    deficit = int(size - take.sum())
    while deficit > 0:
        spare = avail - take
        b = int(np.argmax(spare))  # largest remaining bucket, lowest index on ties
        take[b] += 1
        deficit -= 1
    return sorted(i for b in range(n_b) for i in members[b][: take[b]])


def raw_sample(annotations, size: int, seed: int = 0) -> list[str]:
    ids = sorted(a.object_id for a in annotations)
    if not 0 < size <= len(ids):
        raise ValueError("size must lie in [1, pool size]")
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(ids, size=size, replace=False).tolist())


def histogram(annotations) -> dict[int, int]:
    return {k: len(v) for k, v in sorted(_buckets(annotations).items())}
