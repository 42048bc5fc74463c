"""Heterogeneous knowledge graph over engineers, incidents, KBAs and components.

Nodes are ordered by ``(key, kind)`` so that every adjacency list is sorted by
node key, which makes neighbor order (and therefore seeded random walks)
independent of record insertion order.
"""
from __future__ import annotations

import enum
import itertools
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .ingest import Corpus

logger = logging.getLogger(__name__)


class NodeKind(str, enum.Enum):
    ENGINEER = "Engineer"
    INCIDENT = "Incident"
    KBA = "Kba"
    COMPONENT = "Component"


class NodeId(NamedTuple):
    kind: NodeKind
    key: str

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.key}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        kind, key = text.split(":", 1)
        return cls(NodeKind(kind), key)


def engineer(key: str) -> NodeId:
    return NodeId(NodeKind.ENGINEER, key)


def incident(key: str) -> NodeId:
    return NodeId(NodeKind.INCIDENT, key)


def kba(key: str) -> NodeId:
    return NodeId(NodeKind.KBA, key)


def component(key: str) -> NodeId:
    return NodeId(NodeKind.COMPONENT, key)


class EdgeType(str, enum.Enum):
    RESOLVED = "RESOLVED"
    PARTICIPATED = "PARTICIPATED"
    AUTHORED = "AUTHORED"
    SWARMED_WITH = "SWARMED_WITH"
    TAGGED = "TAGGED"
    DOCUMENTS = "DOCUMENTS"


# allowed endpoint kinds per edge type (unordered)
EDGE_ENDPOINTS = {
    EdgeType.RESOLVED: frozenset({NodeKind.ENGINEER, NodeKind.INCIDENT}),
    EdgeType.PARTICIPATED: frozenset({NodeKind.ENGINEER, NodeKind.INCIDENT}),
    EdgeType.AUTHORED: frozenset({NodeKind.ENGINEER, NodeKind.KBA}),
    EdgeType.SWARMED_WITH: frozenset({NodeKind.ENGINEER}),
    EdgeType.DOCUMENTS: frozenset({NodeKind.KBA, NodeKind.INCIDENT}),
}
TAGGED_ENDPOINTS = (frozenset({NodeKind.INCIDENT, NodeKind.COMPONENT}), frozenset({NodeKind.KBA, NodeKind.COMPONENT}))

ALL_EDGE_TYPES = frozenset(EdgeType)
_KIND_ORDER = {k: i for i, k in enumerate(NodeKind)}


def _node_sort_key(node: NodeId):
    return (node.key, _KIND_ORDER[node.kind])


class UnknownNodeError(KeyError):
    pass


@dataclass(frozen=True)
class WalkConfig:
    walk_count: int = 100
    walk_length: int = 3
    restart_prob: float = 0.5
    neighborhood_size: int = 10

    def __post_init__(self):
        for name in ("walk_count", "walk_length", "neighborhood_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.restart_prob <= 1.0:
            raise ValueError("restart_prob must lie in [0, 1]")


def _csr(n: int, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    indptr.flags.writeable = False
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    dst.flags.writeable = False
    return indptr, dst


class HeteroGraph:
    """Immutable undirected multi-relational graph in per-type CSR form."""

    def __init__(self, nodes: Iterable[NodeId], edges: dict[EdgeType, Iterable[tuple[NodeId, NodeId]]]):
        self.nodes: tuple[NodeId, ...] = tuple(sorted(set(nodes), key=_node_sort_key))
        self.index = {n: i for i, n in enumerate(self.nodes)}
        n = len(self.nodes)
        self.adjacency: dict[EdgeType, tuple[np.ndarray, np.ndarray]] = {}
        all_pairs = set()
        for etype in EdgeType:
            pairs = set()
            for u, v in edges.get(etype, ()):
                if u == v:
                    continue
                _check_endpoints(etype, u, v)
                a, b = self.index[u], self.index[v]
                pairs.add((min(a, b), max(a, b)))
            all_pairs |= pairs
            self.adjacency[etype] = self._symmetric(n, pairs)
        self.indptr, self.indices = self._symmetric(n, all_pairs)
        self.n_edges = {etype: len(self.adjacency[etype][1]) // 2 for etype in EdgeType}

    @staticmethod
    def _symmetric(n, pairs):
        if pairs:
            arr = np.array(sorted(pairs), dtype=np.int64)
            src = np.concatenate([arr[:, 0], arr[:, 1]])
            dst = np.concatenate([arr[:, 1], arr[:, 0]])
        else:
            src = dst = np.empty(0, dtype=np.int64)
        return _csr(n, src, dst)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: NodeId) -> bool:
        return node in self.index

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def nodes_of(self, kind: NodeKind) -> list[NodeId]:
        return [n for n in self.nodes if n.kind == kind]

    def neighbor_indices(self, i: int, edge_type: EdgeType | None = None) -> np.ndarray:
        indptr, indices = (self.indptr, self.indices) if edge_type is None else self.adjacency[edge_type]
        return indices[indptr[i]:indptr[i + 1]]

    def edges(self, edge_type: EdgeType) -> list[tuple[NodeId, NodeId]]:
        indptr, indices = self.adjacency[edge_type]
        out = []
        for u in range(len(self.nodes)):
            for v in indices[indptr[u]:indptr[u + 1]]:
                if u < v:
                    out.append((self.nodes[u], self.nodes[v]))
        return out


def _check_endpoints(etype: EdgeType, u: NodeId, v: NodeId) -> None:
    kinds = frozenset({u.kind, v.kind})
    allowed = TAGGED_ENDPOINTS if etype is EdgeType.TAGGED else (EDGE_ENDPOINTS[etype],)
    if kinds not in allowed:
        raise ValueError(f"{etype.value} edge cannot join {u.kind.value} and {v.kind.value}")


def derive_edges(corpus: Corpus, edge_types: Iterable[EdgeType] = ALL_EDGE_TYPES) -> dict[EdgeType, set]:
    enabled = set(edge_types)
    edges: dict[EdgeType, set] = {t: set() for t in EdgeType}

    def add(etype, u, v):
        if etype in enabled and u != v:
            edges[etype].add((u, v) if _node_sort_key(u) <= _node_sort_key(v) else (v, u))

    for inc in corpus.incidents:
        node = incident(inc.incident_id)
        procs = list(dict.fromkeys(inc.processor_ids))
        if procs:
            add(EdgeType.RESOLVED, engineer(procs[-1]), node)
            for eid in procs[:-1]:
                add(EdgeType.PARTICIPATED, engineer(eid), node)
        for a, b in itertools.combinations(procs, 2):
            add(EdgeType.SWARMED_WITH, engineer(a), engineer(b))
        for cid in inc.component_ids:
            add(EdgeType.TAGGED, node, component(cid))
    for rec in corpus.kbas:
        node = kba(rec.kba_id)
        for eid in rec.author_ids:
            add(EdgeType.AUTHORED, engineer(eid), node)
        add(EdgeType.TAGGED, node, component(rec.component_id))
    for s in corpus.swarms:
        for a, b in itertools.combinations(s.members, 2):
            add(EdgeType.SWARMED_WITH, engineer(a), engineer(b))
        for kid in s.kba_ids:
            add(EdgeType.DOCUMENTS, kba(kid), incident(s.incident_id))
    return edges


def parse_edge_types(text: str) -> tuple[EdgeType, ...]:
    """``"all"`` or a comma-separated list of edge type names."""
    if text.strip().lower() == "all":
        return ALL_EDGE_TYPES
    try:
        return tuple(EdgeType(t.strip().upper()) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ValueError(f"unknown edge type in {text!r}; choose from {', '.join(t.value for t in EdgeType)}") from exc


def build_graph(corpus: Corpus, edge_types: Iterable[EdgeType] = ALL_EDGE_TYPES) -> HeteroGraph:
    nodes = (
        [engineer(e.engineer_id) for e in corpus.engineers]
        + [incident(i.incident_id) for i in corpus.incidents]
        + [kba(k.kba_id) for k in corpus.kbas]
        + [component(c.component_id) for c in corpus.components]
    )
    graph = HeteroGraph(nodes, derive_edges(corpus, edge_types))
    logger.info("graph: %d nodes, %s", len(graph), {t.value: n for t, n in graph.n_edges.items()})
    return graph


def neighbors(graph: HeteroGraph, node: NodeId, edge_type: EdgeType | None = None) -> list[NodeId]:
    """Neighbors sorted by key; raises :class:`UnknownNodeError` for nodes not in the graph."""
    if node not in graph.index:
        raise UnknownNodeError(node)
    return [graph.nodes[j] for j in graph.neighbor_indices(graph.index[node], edge_type)]


# --------------------------------------------------------------------------
# importance sampling


@dataclass(frozen=True)
class Neighborhoods:
    """Sampled importance neighborhoods in CSR form, one row per source."""

    sources: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[r], self.indptr[r + 1]
        return self.indices[lo:hi], self.weights[lo:hi]


def walk_neighborhoods(
    indptr: np.ndarray,
    indices: np.ndarray,
    sources: np.ndarray,
    config: WalkConfig,
    rng: np.random.Generator,
) -> Neighborhoods:
    """Random walks with restart from every source, all advanced in lock step.

    Per step the generator yields one ``(len(sources), walk_count)`` block of
    restart draws, then one block of neighbor draws. A walker restarts when
    its draw is below ``restart_prob``; otherwise it moves to neighbor
    ``floor(u * degree)`` of its current node. Walkers at a node without
    neighbors stay put. Visits to nodes other than the source are counted.
    """
    sources = np.asarray(sources, dtype=np.int64)
    S, W = sources.size, config.walk_count
    deg = np.diff(indptr)
    src = np.repeat(sources[:, None], W, axis=1)
    cur = src.copy()
    rows = np.repeat(np.arange(S)[:, None], W, axis=1)
    hit_rows, hit_nodes = [], []
    for _ in range(config.walk_length):
        restart = rng.random((S, W)) < config.restart_prob
        u = rng.random((S, W))
        d = deg[cur]
        movable = d > 0
        if len(indices):
            step = np.where(movable, indptr[cur] + np.floor(u * d).astype(np.int64), 0)
            nxt = np.where(movable, indices[step], cur)
        else:
            nxt = cur
        cur = np.where(restart, src, nxt)
        visit = ~restart & movable & (cur != src)
        hit_rows.append(rows[visit])
        hit_nodes.append(cur[visit])

    n = len(indptr) - 1
    r = np.concatenate(hit_rows) if hit_rows else np.empty(0, dtype=np.int64)
    v = np.concatenate(hit_nodes) if hit_nodes else np.empty(0, dtype=np.int64)
    pair, counts = np.unique(r * n + v, return_counts=True)
    r, v = pair // n, pair % n
    # rank within each source: most visits first, then lowest node index (= key order)
    order = np.lexsort((v, -counts, r))
    r, v, counts = r[order], v[order], counts[order]
    starts = np.searchsorted(r, np.arange(S + 1))
    rank = np.arange(r.size) - np.repeat(starts[:-1], np.diff(starts))
    keep = rank < config.neighborhood_size
    r, v, counts = r[keep], v[keep], counts[keep].astype(float)
    out_ptr = np.searchsorted(r, np.arange(S + 1)).astype(np.int64)
    per_row = np.zeros(S)
    np.add.at(per_row, r, counts)
    weights = counts / per_row[r] if counts.size else counts
    return Neighborhoods(sources, out_ptr, v, weights)


def sample_importance_neighborhood(
    graph: HeteroGraph, node: NodeId, config: WalkConfig, rng: np.random.Generator
) -> list[tuple[NodeId, float]]:
    """Top visited nodes of seeded random walks with restart from ``node``."""
    if node not in graph.index:
        raise UnknownNodeError(node)
    nb = walk_neighborhoods(graph.indptr, graph.indices, np.array([graph.index[node]]), config, rng)
    idx, w = nb.row(0)
    return [(graph.nodes[j], float(x)) for j, x in zip(idx, w)]


class QueryOverlay:
    """Read-only view of a graph plus temporary incident nodes.

    Temporary nodes are appended after the real ones and carry TAGGED edges to
    their components. Edges are one-way: walks may leave a temporary node but
    the underlying graph never points back at it.
    """

    def __init__(self, graph: HeteroGraph, attachments: Sequence[Sequence[NodeId]]):
        self.graph = graph
        n = len(graph)
        extra_ptr = [0]
        extra_idx = []
        for comps in attachments:
            idx = sorted({graph.index[c] for c in comps if c in graph.index})
            extra_idx.extend(idx)
            extra_ptr.append(len(extra_idx))
        self.n_real = n
        self.n_temp = len(attachments)
        self.indptr = np.concatenate([graph.indptr, graph.indptr[-1] + np.asarray(extra_ptr[1:], dtype=np.int64)])
        self.indices = np.concatenate([graph.indices, np.asarray(extra_idx, dtype=np.int64)])

    def temp_index(self, j: int) -> int:
        return self.n_real + j


def graph_stats(graph: HeteroGraph) -> dict:
    kinds = Counter(n.kind.value for n in graph.nodes)
    hist = Counter(int(d) for d in graph.degree)
    return {
        "nodes": {k.value: kinds.get(k.value, 0) for k in NodeKind},
        "edges": {t.value: graph.n_edges[t] for t in EdgeType},
        "degree_histogram": dict(sorted(hist.items())),
    }


def export_edges(graph: HeteroGraph, path: str | Path) -> None:
    """Write ``kind:key<TAB>edge_type<TAB>kind:key`` lines, sorted."""
    lines = sorted(f"{u}\t{t.value}\t{v}" for t in EdgeType for u, v in graph.edges(t))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
