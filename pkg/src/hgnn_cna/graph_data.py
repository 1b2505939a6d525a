"""Temporal edge lists to snapshot tensors, splits and negative samples."""

from __future__ import annotations

import io
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, TextIO

import numpy as np

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"DGC1"
FEATURE_SCHEMES = ("degree", "random")


class EdgeListError(ValueError):
    """Raised for a malformed edge-list line in strict mode."""


class TemporalEdge(NamedTuple):
    src: int
    dst: int
    timestamp: int
    weight: float = 1.0


@dataclass
class ParseResult:
    edges: list[TemporalEdge]
    node_ids: list[str]
    self_loops: int = 0
    malformed: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


_SPLIT = re.compile(r"[,\s]+")


def _number(tok: str) -> float:
    return float(tok)


def parse_edge_list(stream: TextIO | Iterable[str], strict: bool = False) -> ParseResult:
    """Parse ``SRC DST TIMESTAMP`` or ``SRC DST WEIGHT TIMESTAMP`` lines.

    Fields may be separated by whitespace or commas; blank lines and lines
    starting with ``#`` or ``%`` are ignored.  Node labels are remapped to
    dense ids in order of first appearance.  Self-loops are dropped and
    counted.  Malformed lines raise :class:`EdgeListError` when ``strict``,
    otherwise they are skipped and counted.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    ids: dict[str, int] = {}
    edges: list[TemporalEdge] = []
    loops = bad = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line[0] in "#%":
            continue
        toks = [t for t in _SPLIT.split(line) if t]
        try:
            if len(toks) == 3:
                src, dst, ts = toks
                weight = 1.0
            elif len(toks) == 4:
                src, dst, w, ts = toks
                weight = _number(w)
            else:
                raise ValueError(f"expected 3 or 4 fields, got {len(toks)}")
            tsf = _number(ts)
            if not np.isfinite(tsf) or tsf < 0 or not np.isfinite(weight):
                raise ValueError("timestamp must be a finite non-negative number")
            timestamp = int(tsf)
        except ValueError as exc:
            if strict:
                raise EdgeListError(f"line {lineno}: {exc}: {line!r}") from None
            bad += 1
            continue
        if src == dst:
            loops += 1
            continue
        u = ids.setdefault(src, len(ids))
        v = ids.setdefault(dst, len(ids))
        edges.append(TemporalEdge(u, v, timestamp, weight))
    if bad:
        logger.warning("skipped %d malformed line(s)", bad)
    return ParseResult(edges, list(ids), loops, bad)


def read_edge_list(path: str | Path, strict: bool = False) -> ParseResult:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_edge_list(fh, strict=strict)


@dataclass
class DynamicGraph:
    """Snapshot sequence over a fixed node set.

    ``adjacency`` has shape ``(T, N, N)`` (symmetric, zero diagonal) and
    ``features`` shape ``(T, N, F)``.
    """

    adjacency: np.ndarray
    features: np.ndarray | None = None
    node_ids: list[str] | None = None
    edges_per_slot: list[set[tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self):
        self.adjacency = np.ascontiguousarray(self.adjacency, dtype=float)
        t, n, n2 = self.adjacency.shape
        if n != n2:
            raise ValueError(f"adjacency slices must be square, got {self.adjacency.shape}")
        if not self.edges_per_slot:
            self.edges_per_slot = edge_sets(self.adjacency)
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features, dtype=float)
            if self.features.shape[:2] != (t, n):
                raise ValueError(f"features {self.features.shape} do not match adjacency {self.adjacency.shape}")

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[1]

    @property
    def n_slots(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_features(self) -> int:
        return 0 if self.features is None else self.features.shape[2]

    def edge_counts(self) -> list[int]:
        return [len(e) for e in self.edges_per_slot]

    def with_features(self, features: np.ndarray) -> "DynamicGraph":
        return DynamicGraph(self.adjacency, features, self.node_ids, self.edges_per_slot)

    def hide_after(self, last: int) -> "DynamicGraph":
        """Copy with the adjacency and features of every slot after ``last`` zeroed."""
        if last >= self.n_slots - 1:
            return self
        a = self.adjacency.copy()
        a[last + 1:] = 0.0
        x = None if self.features is None else self.features.copy()
        if x is not None:
            x[last + 1:] = 0.0
        empty: list[set[tuple[int, int]]] = [set() for _ in range(self.n_slots - last - 1)]
        return DynamicGraph(a, x, self.node_ids, self.edges_per_slot[: last + 1] + empty)

    def slots(self, stop: int) -> "DynamicGraph":
        """The first ``stop`` snapshots."""
        feats = None if self.features is None else self.features[:stop]
        return DynamicGraph(self.adjacency[:stop], feats, self.node_ids, self.edges_per_slot[:stop])


def edge_sets(adjacency: np.ndarray) -> list[set[tuple[int, int]]]:
    out = []
    for sl in adjacency:
        i, j = np.nonzero(np.triu(sl, k=1))
        out.append(set(zip(i.tolist(), j.tolist())))
    return out


def build_snapshots(
    edges: list[TemporalEdge],
    n_slots: int,
    binarize: bool = True,
    node_cap: int | None = None,
    n_nodes: int | None = None,
    node_ids: list[str] | None = None,
) -> DynamicGraph:
    """Bin edges into ``n_slots`` equal-width time windows over ``[min_ts, max_ts]``.

    Each edge is symmetrized; repeated edges accumulate weight before the
    optional binarization.  With ``node_cap`` only the highest-degree nodes
    (degree counted over the whole, binarized, edge history; ties by id) are
    kept and re-indexed in their original order.
    """
    if n_slots < 1:
        raise ValueError("need at least one slot")
    if not edges:
        raise ValueError("no edges to build snapshots from")
    src = np.array([e.src for e in edges], dtype=np.int64)
    dst = np.array([e.dst for e in edges], dtype=np.int64)
    ts = np.array([e.timestamp for e in edges], dtype=np.int64)
    w = np.array([e.weight for e in edges], dtype=float)
    n = int(max(src.max(), dst.max()) + 1) if n_nodes is None else n_nodes

    lo, hi = int(ts.min()), int(ts.max())
    if hi == lo:
        slot = np.zeros(len(ts), dtype=np.int64)
    else:
        slot = np.minimum((ts - lo) * n_slots // (hi - lo + 1), n_slots - 1)

    if node_cap is not None and node_cap < n:
        pairs = np.unique(np.stack([np.minimum(src, dst), np.maximum(src, dst)]), axis=1)
        deg = np.bincount(pairs.ravel(), minlength=n)
        order = np.lexsort((np.arange(n), -deg))
        keep = np.sort(order[:node_cap])
        remap = np.full(n, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        ok = (remap[src] >= 0) & (remap[dst] >= 0)
        src, dst, w, slot = remap[src[ok]], remap[dst[ok]], w[ok], slot[ok]
        if node_ids is not None:
            node_ids = [node_ids[k] for k in keep]
        n = len(keep)

    adj = np.zeros((n_slots, n, n))
    # presence, not summed weight, decides binarized links (signed ratings may cancel)
    val = np.ones_like(w) if binarize else w
    np.add.at(adj, (slot, src, dst), val)
    np.add.at(adj, (slot, dst, src), val)
    idx = np.arange(n)
    adj[:, idx, idx] = 0.0
    if binarize:
        adj = (adj != 0).astype(float)
    empty = [t for t in range(n_slots) if not np.any(adj[t])]
    if empty:
        logger.warning("%d of %d slots are empty: %s", len(empty), n_slots, empty)
    return DynamicGraph(adj, node_ids=node_ids)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric normalization with self-loops, ``D^-1/2 (A + I) D^-1/2`` per slice."""
    n = a.shape[1]
    a_tilde = a + np.eye(n)
    d = a_tilde.sum(axis=2)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a_tilde * inv_sqrt[:, :, None] * inv_sqrt[:, None, :]


@dataclass(frozen=True)
class SplitPlan:
    train_slots: tuple[int, ...]
    val_slots: tuple[int, ...]
    test_slots: tuple[int, ...]


def split_temporal(n_slots: int, ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)) -> SplitPlan:
    """Chronological slot split; empty partitions borrow a slot from their left neighbour."""
    if n_slots < 3:
        raise ValueError("a train/val/test split needs at least 3 slots")
    sizes = [int(np.floor(ratios[0] * n_slots)), int(np.floor(ratios[1] * n_slots))]
    sizes.append(n_slots - sum(sizes))
    for k in (1, 2):
        if sizes[k] == 0:
            donor = k - 1 if sizes[k - 1] > 1 else next(d for d in range(3) if sizes[d] > 1)
            sizes[donor] -= 1
            sizes[k] += 1
    cuts = np.cumsum([0] + sizes)
    parts = [tuple(range(cuts[k], cuts[k + 1])) for k in range(3)]
    return SplitPlan(*parts)


@dataclass
class SampleSet:
    """Labelled node pairs ``(i, j, t, y)`` stored column-wise."""

    i: np.ndarray
    j: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls) -> "SampleSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0))

    @classmethod
    def concat(cls, parts: list["SampleSet"]) -> "SampleSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in "ijty"))

    def subset(self, sel) -> "SampleSet":
        return SampleSet(self.i[sel], self.j[sel], self.t[sel], self.y[sel])

    def entries(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.i.tolist(), self.j.tolist(), self.t.tolist(), self.y.astype(int).tolist()))


def positive_samples(g: DynamicGraph, t: int) -> SampleSet:
    pairs = sorted(g.edges_per_slot[t])
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    k = len(arr)
    return SampleSet(arr[:, 0], arr[:, 1], np.full(k, t, dtype=np.int64), np.ones(k))


def negative_sample(g: DynamicGraph, t: int, m: int, seed: int | np.random.SeedSequence) -> SampleSet:
    """Draw ``m`` distinct non-adjacent pairs ``i < j`` of slot ``t`` uniformly."""
    n = g.n_nodes
    rng = np.random.default_rng(seed)
    adj = g.adjacency[t]
    iu, ju = np.triu_indices(n, k=1)
    free = adj[iu, ju] == 0
    n_free = int(free.sum())
    if n_free <= m:
        if n_free < m:
            logger.warning("slot %d has only %d non-edges, %d requested", t, n_free, m)
        pick = np.nonzero(free)[0]
    elif n_free > 4 * m:
        # rejection sampling keeps this O(m) on sparse slots
        chosen: dict[int, None] = {}
        total = len(iu)
        while len(chosen) < m:
            cand = rng.integers(0, total, size=2 * (m - len(chosen)))
            for c in cand.tolist():
                if free[c] and c not in chosen:
                    chosen[c] = None
                    if len(chosen) == m:
                        break
        pick = np.fromiter(chosen, dtype=np.int64)
    else:
        pick = rng.choice(np.nonzero(free)[0], size=m, replace=False)
    k = len(pick)
    return SampleSet(iu[pick].astype(np.int64), ju[pick].astype(np.int64), np.full(k, t, dtype=np.int64), np.zeros(k))


def balanced_samples(g: DynamicGraph, slots: Iterable[int], seed: int) -> SampleSet:
    """All positives of each slot plus an equal number of fresh negatives."""
    seq = np.random.SeedSequence(seed)
    slots = list(slots)
    children = seq.spawn(len(slots))
    parts = []
    for t, child in zip(slots, children):
        pos = positive_samples(g, t)
        if not len(pos):
            continue
        parts += [pos, negative_sample(g, t, len(pos), child)]
    return SampleSet.concat(parts)


def init_features(g: DynamicGraph, n_features: int, scheme: str = "degree", seed: int = 0) -> np.ndarray:
    """Node feature tensor ``(T, N, F)``.

    ``"degree"`` puts the degree divided by the slot's largest degree in
    column 0 and seeded noise in ``[-0.1, 0.1]`` elsewhere; ``"random"`` is
    noise throughout.  The noise is drawn once per node and repeated in every
    slot, so it acts as a fixed node signature.
    """
    if n_features < 1:
        raise ValueError("feature dimension must be >= 1")
    if scheme not in FEATURE_SCHEMES:
        raise ValueError(f"unknown feature scheme {scheme!r}; expected one of {FEATURE_SCHEMES}")
    t, n = g.n_slots, g.n_nodes
    rng = np.random.default_rng(seed)
    x = np.repeat(rng.uniform(-0.1, 0.1, size=(1, n, n_features)), t, axis=0)
    if scheme == "degree":
        deg = (g.adjacency != 0).sum(axis=2).astype(float)
        top = np.maximum(deg.max(axis=1, keepdims=True), 1.0)
        x[:, :, 0] = deg / top
    return x


def save_cache(path: str | Path, g: DynamicGraph) -> None:
    """Write ``DGC1`` + little-endian u32 ``N, F, T`` + float64 adjacency and features."""
    if g.features is None:
        raise ValueError("graph has no features to cache")
    t, n, f = g.features.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", n, f, t))
        fh.write(np.ascontiguousarray(g.adjacency, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(g.features, dtype="<f8").tobytes())


def load_cache(path: str | Path) -> DynamicGraph:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a snapshot cache (bad magic)")
    n, f, t = struct.unpack_from("<III", raw, 4)
    off = 16
    size_a = t * n * n * 8
    size_x = t * n * f * 8
    if len(raw) != off + size_a + size_x:
        raise ValueError(f"{path}: truncated or oversized cache")
    adj = np.frombuffer(raw, dtype="<f8", count=t * n * n, offset=off).reshape(t, n, n).astype(float)
    x = np.frombuffer(raw, dtype="<f8", count=t * n * f, offset=off + size_a).reshape(t, n, f).astype(float)
    return DynamicGraph(adj, x)
