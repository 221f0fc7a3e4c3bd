"""Nearest-neighbour matching, Lowe's ratio test and good-match voting."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from typorec import kernels
from typorec.features.types import BINARY, DescriptorSet

HAMMING = "HAMMING"
L2 = "L2"
BRUTE_FORCE = "BRUTE_FORCE"
KDTREE = "KDTREE"

UNKNOWN = "<unknown>"
DEFAULT_RATIO = 0.8


@dataclass(frozen=True)
class MatcherConfig:
    strategy: str = BRUTE_FORCE
    metric: str = HAMMING
    ratio_threshold: float = DEFAULT_RATIO
    kdtree_leaf_size: int = 16

    def __post_init__(self):
        if self.strategy not in (BRUTE_FORCE, KDTREE):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.metric not in (HAMMING, L2):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0.0 < self.ratio_threshold < 1.0:
            raise ValueError("ratio threshold must lie in (0, 1)")
        if self.kdtree_leaf_size < 1:
            raise ValueError("leaf size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "metric": self.metric,
            "ratio_threshold": self.ratio_threshold,
            "kdtree_leaf_size": self.kdtree_leaf_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatcherConfig":
        return cls(**d)


def check_metric(kind: str, metric: str) -> None:
    if (kind == BINARY) != (metric == HAMMING):
        raise ValueError(f"metric {metric} is incompatible with {kind} descriptors")


def _as_rows(data: np.ndarray, metric: str) -> np.ndarray:
    if metric == HAMMING:
        return np.ascontiguousarray(data, dtype=np.uint8)
    return np.ascontiguousarray(data, dtype=np.float32)


def canonical_distance(raw: np.ndarray, metric: str) -> np.ndarray:
    """Kernel output (Hamming count or squared L2) to the reported float64 distance.

    L2 distances are rounded through float32 so that every code path reports
    bit-identical values; the rounding is monotone, so neighbour order is kept.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if metric == HAMMING:
        out = raw.copy()
        out[raw >= kernels.HAMMING_MISSING] = np.inf
        return out
    return np.sqrt(raw).astype(np.float32).astype(np.float64)


# ------------------------------------------------------------------- kd-tree


class KDTree:
    """Exact kd-tree over descriptors.

    Binary descriptors are split on unpacked bits and compared by popcount;
    float descriptors use squared Euclidean distance.  Queries return the two
    nearest rows, ordered by ``(distance, row)``, identical to brute force.
    """

    def __init__(self, data: np.ndarray, metric: str, leaf_size: int = 16, width: Optional[int] = None):
        self.metric = metric
        self.data = _as_rows(data, metric)
        n = self.data.shape[0]
        if metric == HAMMING:
            bits = np.unpackbits(self.data, axis=1, bitorder="little")
            if width is not None:
                bits = bits[:, :width]
            coords = bits.astype(np.float32)
        else:
            coords = self.data
        self.n = n
        split_dim, hi_left, lo_right, left, right, start, stop = [], [], [], [], [], [], []
        perm = np.arange(n, dtype=np.int64)

        def new_node():
            for lst, val in ((split_dim, -1), (hi_left, 0.0), (lo_right, 0.0), (left, -1), (right, -1), (start, 0), (stop, 0)):
                lst.append(val)
            return len(left) - 1

        root = new_node()
        stack = [(root, 0, n)]
        while stack:
            node, a, b = stack.pop()
            start[node], stop[node] = a, b
            if b - a <= leaf_size:
                continue
            pts = coords[perm[a:b]]
            var = pts.astype(np.float64).var(axis=0)
            k = int(np.argmax(var))
            if var[k] <= 0.0:
                continue
            vals = pts[:, k]
            srt = np.sort(vals, kind="stable")
            split = srt[(b - a) // 2]
            mask = vals <= split if srt[0] == split else vals < split
            seg = perm[a:b]
            perm[a:b] = np.concatenate([seg[mask], seg[~mask]])
            mid = a + int(mask.sum())
            split_dim[node] = k
            hi_left[node] = float(vals[mask].max())
            lo_right[node] = float(vals[~mask].min())
            lnode, rnode = new_node(), new_node()
            left[node], right[node] = lnode, rnode
            stack.append((rnode, mid, b))
            stack.append((lnode, a, mid))

        self._perm = perm.astype(np.int32)
        self._coords = np.ascontiguousarray(coords[perm], dtype=np.float32)
        self._packed = np.ascontiguousarray(self.data[perm]) if metric == HAMMING else None
        i32 = lambda v: np.asarray(v, dtype=np.int32)
        self._nodes = (
            i32(split_dim), np.asarray(hi_left, dtype=np.float64), np.asarray(lo_right, dtype=np.float64),
            i32(left), i32(right), i32(start), i32(stop),
        )
        self.n_nodes = len(left)

    def query2(self, query: np.ndarray):
        """Raw ``(d1, d2, i1, i2)`` (squared L2 or Hamming) for each query row."""
        query = _as_rows(query, self.metric)
        if self.metric == HAMMING:
            qc = np.unpackbits(query, axis=1, bitorder="little")[:, : self._coords.shape[1]].astype(np.float32)
            qp = query
        else:
            qc, qp = query, None
        qc = np.ascontiguousarray(qc, dtype=np.float32)
        return kernels.kdtree_top2(self._coords, self._packed, self._perm, *self._nodes, qc, qp)


# -------------------------------------------------------------------- indexes


@dataclass
class Neighbors:
    """Two nearest train rows per query row."""

    dist: np.ndarray  # (n, 2) float64, d1 <= d2
    idx: np.ndarray  # (n, 2) int64, -1 when absent
    views: Optional[np.ndarray] = None  # (n, 2) view id of each neighbour


class DescriptorIndex:
    """Search structure over stacked training descriptors of one pipeline."""

    def __init__(self, data: np.ndarray, cfg: MatcherConfig, width: Optional[int] = None,
                 views: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.data = _as_rows(data, cfg.metric)
        self.views = None if views is None else np.asarray(views, dtype=np.int64)
        self._tree = KDTree(self.data, cfg.metric, cfg.kdtree_leaf_size, width) if cfg.strategy == KDTREE else None

    def __len__(self):
        return self.data.shape[0]

    def raw_top2(self, query: np.ndarray):
        query = _as_rows(query, self.cfg.metric)
        if self._tree is not None:
            return self._tree.query2(query)
        offsets = np.array([0, len(self)], dtype=np.int64)
        fn = kernels.hamming_top2 if self.cfg.metric == HAMMING else kernels.l2_top2
        d1, d2, i1, i2 = fn(query, self.data, offsets)
        return d1[:, 0], d2[:, 0], i1[:, 0], i2[:, 0]

    def knn2(self, query: np.ndarray) -> Neighbors:
        d1, d2, i1, i2 = self.raw_top2(query)
        dist = np.stack([canonical_distance(d1, self.cfg.metric), canonical_distance(d2, self.cfg.metric)], axis=1)
        idx = np.stack([i1, i2], axis=1).astype(np.int64)
        views = None
        if self.views is not None:
            views = np.where(idx >= 0, self.views[np.maximum(idx, 0)], -1)
        return Neighbors(dist, idx, views)


def knn2(query: DescriptorSet, train, cfg: MatcherConfig) -> Neighbors:
    """Two nearest train descriptors per query descriptor (exact for both strategies)."""
    check_metric(query.kind, cfg.metric)
    if isinstance(train, DescriptorSet):
        check_metric(train.kind, cfg.metric)
        train = DescriptorIndex(train.data, cfg, width=train.width)
    if len(train) < 2:
        raise ValueError("training set needs at least 2 descriptors")
    return train.knn2(query.data)


# ---------------------------------------------------------------- ratio test


def ratio_mask(d1: np.ndarray, d2: np.ndarray, r: float = DEFAULT_RATIO) -> np.ndarray:
    """Boolean mask of ``d1/d2 < r``; exact duplicates (``d1 = d2 = 0``) pass, absent seconds fail."""
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d1 / d2
    kept = (ratio < r) | ((d1 == 0) & (d2 == 0))
    return kept & np.isfinite(d2) & np.isfinite(d1)


@dataclass(frozen=True)
class Match:
    query_idx: int
    train_view: int
    train_idx: int
    distance: float


def ratio_filter(neighbors: Neighbors, r: float = DEFAULT_RATIO) -> List[Match]:
    """Keep nearest-neighbour pairs passing Lowe's ratio test."""
    keep = np.nonzero(ratio_mask(neighbors.dist[:, 0], neighbors.dist[:, 1], r))[0]
    views = neighbors.views[:, 0] if neighbors.views is not None else np.full(len(neighbors.dist), -1)
    return [
        Match(int(q), int(views[q]), int(neighbors.idx[q, 0]), float(neighbors.dist[q, 0]))
        for q in keep
    ]


# --------------------------------------------------------------------- voting


@dataclass(frozen=True)
class VoteTally:
    counts: Dict[str, int]
    winner: str
    total_good: int

    def to_dict(self) -> dict:
        return {"counts": dict(sorted(self.counts.items())), "winner": self.winner, "total_good": self.total_good}


def tally(labels: Iterable[str]) -> VoteTally:
    counts = Counter(labels)
    total = sum(counts.values())
    if total == 0:
        return VoteTally({}, UNKNOWN, 0)
    best = max(counts.values())
    winner = min(lbl for lbl, c in counts.items() if c == best)
    return VoteTally(dict(counts), winner, total)


def vote(good_matches: Sequence[Match], model_labels: Mapping[int, str]) -> VoteTally:
    """Sum good matches per label; ties go to the lexicographically smallest label."""
    return tally(model_labels[m.train_view] for m in good_matches)


# ------------------------------------------------------- per-view top-2 table


class MatchTable:
    """Two smallest distances from every descriptor to every view's descriptors.

    Row ``i`` of ``d1``/``d2`` is a descriptor of view ``owner[i]``; column
    ``v`` holds its two nearest distances among the descriptors of view
    ``v``.  The two nearest neighbours inside any set of views are then the
    two smallest entries amongst those columns, so leave-one-out folds,
    subsets and typology-restricted models all reduce to column masks and
    never need a rebuilt index.
    """

    def __init__(self, sets: Sequence[DescriptorSet], cfg: MatcherConfig):
        self.cfg = cfg
        self.n_views = len(sets)
        for s in sets:
            check_metric(s.kind, cfg.metric)
        counts = np.array([len(s) for s in sets], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.owner = np.repeat(np.arange(self.n_views), counts)
        width = sets[0].width if sets else 0
        row_w = sets[0].row_width if sets else 0
        dtype = np.uint8 if cfg.metric == HAMMING else np.float32
        stacked = np.concatenate([s.data for s in sets], axis=0) if int(counts.sum()) else np.zeros((0, row_w), dtype)
        stacked = _as_rows(stacked, cfg.metric)
        N, V = stacked.shape[0], self.n_views
        store = np.uint16 if cfg.metric == HAMMING else np.float32
        self._missing = np.iinfo(np.uint16).max if cfg.metric == HAMMING else np.inf
        self.d1 = np.full((N, V), self._missing, dtype=store)
        self.d2 = np.full((N, V), self._missing, dtype=store)
        if N == 0:
            return
        if cfg.strategy == KDTREE:
            for v in range(V):
                a, b = self.offsets[v], self.offsets[v + 1]
                if a == b:
                    continue
                tree = KDTree(stacked[a:b], cfg.metric, cfg.kdtree_leaf_size, width)
                r1, r2, _, _ = tree.query2(stacked)
                self.d1[:, v] = self._store(r1)
                self.d2[:, v] = self._store(r2)
        else:
            fn = kernels.hamming_top2 if cfg.metric == HAMMING else kernels.l2_top2
            for q in range(V):
                a, b = self.offsets[q], self.offsets[q + 1]
                if a == b:
                    continue
                r1, r2, _, _ = fn(stacked[a:b], stacked, self.offsets)
                self.d1[a:b] = self._store(r1)
                self.d2[a:b] = self._store(r2)

    def _store(self, raw):
        dist = canonical_distance(raw, self.cfg.metric)
        if self.cfg.metric == HAMMING:
            out = np.where(np.isfinite(dist), dist, self._missing)
            return out.astype(np.uint16)
        return dist.astype(np.float32)

    def _load(self, arr):
        out = arr.astype(np.float64)
        if self.cfg.metric == HAMMING:
            out[arr == self._missing] = np.inf
        return out

    def rows(self, view: int) -> slice:
        return slice(int(self.offsets[view]), int(self.offsets[view + 1]))

    def top2(self, view: int, allowed: np.ndarray):
        """Merged ``(d1, d2, nearest_view)`` for the descriptors of ``view`` over ``allowed`` views."""
        cols = np.nonzero(np.asarray(allowed, dtype=bool))[0]
        sl = self.rows(view)
        n = sl.stop - sl.start
        if n == 0 or len(cols) == 0:
            return np.full(n, np.inf), np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
        D1 = self._load(self.d1[sl][:, cols])
        D2 = self._load(self.d2[sl][:, cols])
        r = np.arange(n)
        j = np.argmin(D1, axis=1)
        m1 = D1[r, j]
        D1[r, j] = np.inf
        m2 = np.minimum(D2[r, j], D1.min(axis=1))
        nearest = np.where(np.isfinite(m1), cols[j], -1)
        return m1, m2, nearest

    def good_views(self, view: int, allowed: np.ndarray, r: Optional[float] = None) -> np.ndarray:
        """View ids of the nearest neighbours that pass the ratio test."""
        r = self.cfg.ratio_threshold if r is None else r
        m1, m2, nearest = self.top2(view, allowed)
        return nearest[ratio_mask(m1, m2, r)]

    def recognize(self, view: int, allowed: np.ndarray, view_labels: Sequence[str]) -> VoteTally:
        return tally(view_labels[v] for v in self.good_views(view, allowed))
