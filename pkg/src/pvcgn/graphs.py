"""Physical, similarity and correlation graphs over metro stations.

All graphs follow the convention that ``W[i, j]`` is the weight of the edge
from source station ``j`` into destination station ``i``; an edge is stored as
the pair ``(src=j, dst=i)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, ConfigError, NormalizationError, ParseError, ShapeError
from .ingest import RidershipTensor, StationIndex, TripTable, AfcRecord, as_trip_table, zscore_apply, zscore_fit

log = logging.getLogger(__name__)

KINDS = ("physical", "similarity", "correlation")
KIND_CODES = {"p": "physical", "s": "similarity", "c": "correlation"}


class EdgeList:
    """Directed edges ``src -> dst``, kept sorted by (dst, src) and duplicate-free."""

    def __init__(self, src: Iterable[int], dst: Iterable[int]) -> None:
        src = np.asarray(list(src) if not isinstance(src, np.ndarray) else src, dtype=np.int64)
        dst = np.asarray(list(dst) if not isinstance(dst, np.ndarray) else dst, dtype=np.int64)
        if src.shape != dst.shape:
            raise ShapeError("src and dst differ in length")
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        if len(src) > 1:
            dup = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1])
            if dup.any():
                k = int(np.argmax(dup))
                raise ArgumentError(f"duplicate edge {src[k]}->{dst[k]}")
        self.src = src
        self.dst = dst

    def __len__(self) -> int:
        return len(self.src)

    def __iter__(self):
        return zip(self.src.tolist(), self.dst.tolist())

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, EdgeList)
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
        )

    def pairs(self) -> set[tuple[int, int]]:
        return set(self)

    def check_range(self, n: int) -> None:
        if len(self) and (min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= n):
            raise ArgumentError(f"edge endpoint outside [0, {n})")


class WeightedGraph:
    """Sparse row-normalized weight matrix plus its edge list (immutable)."""

    def __init__(self, n: int, kind: str, edges: EdgeList, weights: np.ndarray, metadata: dict | None = None):
        edges.check_range(n)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(edges),):
            raise ShapeError("one weight per edge required")
        self.n = n
        self.kind = kind
        self.edges = edges
        self.weights = weights
        self.metadata = dict(metadata or {})
        self.matrix = sp.csr_array((weights, (edges.dst, edges.src)), shape=(n, n))
        self.matrix_t = sp.csr_array(self.matrix.T)
        self.weights.setflags(write=False)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.edges.dst, weights=self.weights, minlength=self.n)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.kind}:{self.n}:".encode())
        h.update(self.edges.src.astype("<i8").tobytes())
        h.update(self.edges.dst.astype("<i8").tobytes())
        h.update(self.weights.astype("<f8").tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "kind": self.kind,
            "edges": [
                {"i": int(i), "j": int(j), "w": float(w)}
                for j, i, w in zip(self.edges.src, self.edges.dst, self.weights)
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WeightedGraph":
        edges = obj["edges"]
        el = EdgeList([e["j"] for e in edges], [e["i"] for e in edges])
        lookup = {(e["j"], e["i"]): e["w"] for e in edges}
        weights = [lookup[p] for p in el]
        return cls(int(obj["n"]), obj["kind"], el, np.array(weights), obj.get("metadata"))

    def __repr__(self) -> str:
        return f"WeightedGraph(kind={self.kind!r}, n={self.n}, edges={len(self.edges)})"


@dataclass(frozen=True)
class GraphTriple:
    physical: WeightedGraph
    similarity: WeightedGraph
    correlation: WeightedGraph

    def __post_init__(self) -> None:
        if not (self.physical.n == self.similarity.n == self.correlation.n):
            raise ShapeError("graphs in a triple must share the station count")

    @property
    def n(self) -> int:
        return self.physical.n

    def by_code(self, code: str) -> WeightedGraph:
        return getattr(self, KIND_CODES[code])

    @cached_property
    def hash(self) -> str:
        h = hashlib.sha256()
        for g in (self.physical, self.similarity, self.correlation):
            h.update(g.digest().encode())
        return h.hexdigest()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for kind in KINDS:
            with open(directory / f"{kind}.json", "w", encoding="utf-8") as fh:
                json.dump(getattr(self, kind).to_json(), fh, indent=1)

    @classmethod
    def load(cls, directory: str | Path) -> "GraphTriple":
        directory = Path(directory)
        graphs = {}
        for kind in KINDS:
            with open(directory / f"{kind}.json", encoding="utf-8") as fh:
                graphs[kind] = WeightedGraph.from_json(json.load(fh))
        return cls(**graphs)


def read_topology(path: str | Path, index: StationIndex) -> list[tuple[int, int]]:
    """Undirected station pairs from a ``src,dst`` CSV of station names."""
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src", "dst"]:
            raise ParseError("expected header src,dst", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            a, b = (c.strip() for c in row)
            for name in (a, b):
                if name not in index:
                    raise ParseError(f"unknown station {name!r}", line=lineno)
            pairs.append((index[a], index[b]))
    return pairs


def write_topology(path: str | Path, pairs: Iterable[tuple[int, int]], index: StationIndex) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        for a, b in pairs:
            w.writerow([index.names[a], index.names[b]])


def build_physical(pairs: Iterable[tuple[int, int]], n: int) -> WeightedGraph:
    """Symmetric 0/1 connection matrix with zero diagonal, normalized per row."""
    P = np.zeros((n, n))
    for a, b in pairs:
        if a == b:
            raise ArgumentError(f"self pair ({a}, {a}) in physical topology")
        if not (0 <= a < n and 0 <= b < n):
            raise ArgumentError(f"pair ({a}, {b}) outside [0, {n})")
        P[a, b] = P[b, a] = 1.0
    isolated = np.flatnonzero(P.sum(axis=1) == 0)
    if len(isolated):
        log.warning("isolated stations in physical graph: %s", isolated.tolist())
    dst, src = np.nonzero(P)
    graph = row_normalize(P, EdgeList(src, dst), kind="physical")
    return graph


@numba.njit(cache=True)
def _dtw(a, b):
    la, lb, c = a.shape[0], b.shape[0], a.shape[1]
    prev = np.full(lb + 1, np.inf)
    cur = np.full(lb + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, la + 1):
        cur[0] = np.inf
        for j in range(1, lb + 1):
            acc = 0.0
            for k in range(c):
                diff = a[i - 1, k] - b[j - 1, k]
                acc += diff * diff
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = np.sqrt(acc) + best
        prev, cur = cur, prev
    return prev[lb]


@numba.njit(cache=True)
def _dtw_all_pairs(series):
    # series: [N, L, C]
    n = series.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = _dtw(series[i], series[j])
            out[i, j] = d
            out[j, i] = d
    return out


def _as_points(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ArgumentError("DTW sequences must be 1-d or [length, dim]")
    return np.ascontiguousarray(arr)


def dtw_distance(a, b) -> float:
    """Unconstrained DTW with Euclidean point cost; returns the cumulative cost."""
    a, b = _as_points(a), _as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise ArgumentError("DTW needs non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise ArgumentError("DTW sequences differ in point dimension")
    return float(_dtw(a, b))


def station_series(tensor: RidershipTensor, normalize: bool = True) -> np.ndarray:
    """Per-station flow series ``[N, T, C]``; z-scored with the tensor's own stats."""
    values = tensor.values
    if normalize:
        values = zscore_apply(values, zscore_fit(values))
    return np.ascontiguousarray(np.transpose(values, (1, 0, 2)))


def dtw_matrix(series: np.ndarray, cache_dir: str | Path | None = None) -> np.ndarray:
    """Pairwise DTW distances between the rows of ``series`` ([N, L, C])."""
    series = np.ascontiguousarray(series, dtype=np.float64)
    path = None
    if cache_dir is not None:
        key = hashlib.sha256(series.tobytes() + str(series.shape).encode()).hexdigest()[:24]
        path = Path(cache_dir) / f"dtw-{key}.npy"
        if path.exists():
            return np.load(path)
    dist = _dtw_all_pairs(series)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, dist)
    return dist


def similarity_matrix(
    tensor: RidershipTensor, normalize: bool = True, cache_dir: str | Path | None = None
) -> np.ndarray:
    """``S[i, j] = exp(-DTW(X^i, X^j))`` off the diagonal, 0 on it."""
    dist = dtw_matrix(station_series(tensor, normalize), cache_dir)
    S = np.exp(-dist)
    np.fill_diagonal(S, 0.0)
    return S


@dataclass(frozen=True)
class Selection:
    """Edge selection rule: ``topk`` keeps k sources per row, ``thresh`` keeps scores >= tau."""

    rule: str
    value: float

    @classmethod
    def parse(cls, text: str) -> "Selection":
        try:
            rule, raw = text.split(":")
        except ValueError:
            raise ConfigError(f"selection must look like topk:10 or thresh:0.1, got {text!r}") from None
        rule = rule.strip().lower()
        if rule == "topk":
            k = int(raw)
            if k < 1:
                raise ConfigError("topk needs k >= 1")
            return cls("topk", k)
        if rule in ("thresh", "threshold"):
            tau = float(raw)
            if tau <= 0:
                raise ConfigError("threshold must be positive")
            return cls("thresh", tau)
        raise ConfigError(f"unknown selection rule {rule!r}")

    def __str__(self) -> str:
        return f"topk:{int(self.value)}" if self.rule == "topk" else f"thresh:{self.value:g}"

    def apply(self, scores: np.ndarray, include_diagonal: bool = False) -> EdgeList:
        if self.rule == "topk":
            return select_topk(scores, int(self.value), include_diagonal)
        return select_threshold(scores, self.value, include_diagonal)


def _check_square(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"score matrix must be square, got {scores.shape}")
    return scores


def select_topk(scores: np.ndarray, k: int, include_diagonal: bool = False) -> EdgeList:
    """Per destination row ``i``, edges from the k highest-scoring sources ``j``.

    Ties go to the smaller ``j``. Only positive scores are eligible, so a row
    with fewer than k positive entries yields fewer than k edges.
    """
    scores = _check_square(scores)
    n = scores.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the station count {n}")
    cols = np.arange(n)
    src, dst = [], []
    for i in range(n):
        row = scores[i]
        eligible = row > 0
        if not include_diagonal:
            eligible[i] = False
        cand = cols[eligible]
        order = np.lexsort((cand, -row[cand]))[:k]
        src.extend(cand[order].tolist())
        dst.extend([i] * len(order))
    return EdgeList(src, dst)


def select_threshold(scores: np.ndarray, tau: float, include_diagonal: bool = False) -> EdgeList:
    """Edges for every score ``>= tau`` (diagonal only if ``include_diagonal``)."""
    scores = _check_square(scores)
    if not tau > 0:
        raise ConfigError("threshold must be positive")
    mask = scores >= tau
    if not include_diagonal:
        np.fill_diagonal(mask, False)
    dst, src = np.nonzero(mask)
    return EdgeList(src, dst)


def row_normalize(scores: np.ndarray, edges: EdgeList, kind: str = "virtual", metadata: dict | None = None) -> WeightedGraph:
    """``W[i, j] = score[i, j] / sum of score[i, k] over selected sources k``."""
    scores = _check_square(scores)
    n = scores.shape[0]
    edges.check_range(n)
    selected = scores[edges.dst, edges.src]
    if len(selected) and not (selected > 0).all():
        bad = int(np.argmin(selected > 0))
        raise NormalizationError(
            f"selected edge {edges.src[bad]}->{edges.dst[bad]} has non-positive score {selected[bad]}"
        )
    totals = np.bincount(edges.dst, weights=selected, minlength=n)
    weights = selected / totals[edges.dst] if len(selected) else selected
    empty = np.flatnonzero(np.bincount(edges.dst, minlength=n) == 0)
    if len(empty) and kind != "physical":
        log.warning("%s graph: stations without incoming edges: %s", kind, empty.tolist())
    return WeightedGraph(n, kind, edges, weights, metadata)


def build_similarity(
    tensor: RidershipTensor,
    selection: Selection | str,
    normalize: bool = True,
    cache_dir: str | Path | None = None,
) -> WeightedGraph:
    if isinstance(selection, str):
        selection = Selection.parse(selection)
    S = similarity_matrix(tensor, normalize=normalize, cache_dir=cache_dir)
    edges = selection.apply(S, include_diagonal=False)
    meta = {"selection": str(selection), "dtw_scale": "zscore" if normalize else "raw", "dtw_points": tensor.T}
    return row_normalize(S, edges, kind="similarity", metadata=meta)


def od_counts(records: TripTable | Iterable[AfcRecord], n: int) -> np.ndarray:
    """``D[i, j]`` = number of trips entering at ``j`` and exiting at ``i``."""
    trips = as_trip_table(records)
    flat = np.bincount(trips.exit_station * n + trips.entry_station, minlength=n * n)
    return flat.reshape(n, n).astype(np.float64)


def correlation_matrix(records: TripTable | Iterable[AfcRecord], n: int) -> np.ndarray:
    """Row-normalized origin shares ``C[i, j] = D[i, j] / sum_k D[i, k]``; empty rows stay zero."""
    D = od_counts(records, n)
    totals = D.sum(axis=1, keepdims=True)
    C = np.divide(D, totals, out=np.zeros_like(D), where=totals > 0)
    empty = np.flatnonzero(totals[:, 0] == 0)
    if len(empty):
        log.warning("stations with no arriving trips: %s", empty.tolist())
    return C


def build_correlation(records: TripTable | Iterable[AfcRecord], n: int, selection: Selection | str) -> WeightedGraph:
    if isinstance(selection, str):
        selection = Selection.parse(selection)
    C = correlation_matrix(records, n)
    edges = selection.apply(C, include_diagonal=True)
    return row_normalize(C, edges, kind="correlation", metadata={"selection": str(selection)})


def build_graph_triple(
    pairs: Sequence[tuple[int, int]],
    train_tensor: RidershipTensor,
    train_records: TripTable | Iterable[AfcRecord],
    sim_selection: Selection | str,
    corr_selection: Selection | str,
    cache_dir: str | Path | None = None,
) -> GraphTriple:
    n = train_tensor.N
    return GraphTriple(
        physical=build_physical(pairs, n),
        similarity=build_similarity(train_tensor, sim_selection, cache_dir=cache_dir),
        correlation=build_correlation(train_records, n, corr_selection),
    )
