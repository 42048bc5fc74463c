"""Ranking engineers for an incoming incident.

An incident that is not in the training graph is embedded inductively: it is
attached as a temporary node to its components and pushed through the trained
GNN. Engineers already on the incident (its current swarm) can be fused into
the query vector and are excluded from the output.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .featurize import NodeFeaturizer, NodeFeatures
from .gnn import GnnModel, NeighborTable, aligned_features, embed_nodes, embed_rows, init_model, sample_table
from .ingest import Corpus
from .kgraph import (
    ALL_EDGE_TYPES, EdgeType, HeteroGraph, NodeKind, QueryOverlay, WalkConfig, build_graph, component, engineer,
)
from .train import TrainConfig, TrainHistory, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Query:
    description: str = ""
    communication: str = ""
    component_ids: tuple[str, ...] = ()
    current_swarm: tuple[str, ...] = ()
    created_date: dt.date | None = None
    incident_id: str | None = None

    @property
    def text(self) -> str:
        return f"{self.description}\n{self.communication}".strip()

    @property
    def degraded(self) -> bool:
        return not self.component_ids

    @classmethod
    def from_dict(cls, obj: dict) -> "Query":
        created = obj.get("created_date")
        return cls(
            description=obj.get("description", ""),
            communication=obj.get("communication_summary", obj.get("communication", "")),
            component_ids=tuple(obj.get("component_ids", ())),
            current_swarm=tuple(dict.fromkeys(obj.get("current_swarm", ()))),
            created_date=dt.date.fromisoformat(created) if created else None,
            incident_id=obj.get("incident_id"),
        )

    @classmethod
    def read(cls, path: str | Path) -> "Query":
        text = Path(path).read_text(encoding="utf-8").strip()
        return cls.from_dict(json.loads(text.splitlines()[0]))


@dataclass(frozen=True)
class RankedList:
    """Engineers by descending score; equal scores fall back to ascending id."""

    entries: tuple[tuple[str, float], ...]

    @classmethod
    def from_scores(cls, engineer_ids: Sequence[str], scores: np.ndarray, exclude: Iterable[str] = ()) -> "RankedList":
        ids = list(engineer_ids)
        scores = np.asarray(scores, dtype=float)
        if scores.shape != (len(ids),):
            raise ValueError("one score per engineer is required")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        id_rank = np.empty(len(ids), dtype=np.int64)
        id_rank[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))
        order = np.lexsort((id_rank, -scores))
        skip = set(exclude)
        return cls(tuple((ids[i], float(scores[i])) for i in order if ids[i] not in skip))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def engineer_ids(self) -> list[str]:
        return [e for e, _ in self.entries]

    def top_k(self, k: int) -> list[str]:
        return [e for e, _ in self.entries[:k]]

    def to_csv(self, k: int | None = None) -> str:
        rows = ["rank,engineer_id,score"]
        for r, (eid, score) in enumerate(self.entries[:k] if k else self.entries, start=1):
            rows.append(f"{r},{eid},{score:.6f}")
        return "\n".join(rows) + "\n"


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def combine_with_swarm(incident_emb: np.ndarray, swarm_embs: Sequence[np.ndarray], lam: float = 0.5) -> np.ndarray:
    """``normalize(lam * incident + (1 - lam) * mean(swarm))``; the incident vector alone when the swarm is empty."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if len(swarm_embs) == 0 or lam == 1.0:
        return incident_emb
    fused = lam * incident_emb + (1.0 - lam) * np.mean(np.asarray(swarm_embs), axis=0)
    norm = np.linalg.norm(fused)
    if norm == 0:
        logger.warning("swarm fusion cancelled out; using the incident embedding alone")
        return incident_emb
    return fused / norm


@dataclass
class EngineerIndex:
    engineer_ids: list[str]
    vectors: np.ndarray
    model_hash: str = ""
    flagged: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.position = {e: i for i, e in enumerate(self.engineer_ids)}

    def __len__(self) -> int:
        return len(self.engineer_ids)

    def __getitem__(self, engineer_id: str) -> np.ndarray:
        return self.vectors[self.position[engineer_id]]

    def save(self, path: str | Path) -> None:
        np.savez(path, ids=np.array(self.engineer_ids, dtype=str), vectors=self.vectors,
                 model_hash=np.array(self.model_hash), flagged=np.array(sorted(self.flagged), dtype=str))

    @classmethod
    def load(cls, path: str | Path) -> "EngineerIndex":
        with np.load(path) as data:
            return cls([str(x) for x in data["ids"]], data["vectors"].copy(), str(data["model_hash"]),
                       {str(x) for x in data["flagged"]})


def rank_engineers(query_emb: np.ndarray, index: EngineerIndex, exclude: Iterable[str] = ()) -> RankedList:
    """Exhaustive dot-product scoring against every indexed engineer."""
    if len(index) == 0:
        raise ValueError("engineer index is empty")
    return RankedList.from_scores(index.engineer_ids, index.vectors @ query_emb, exclude)


class IncidentFeatureBuilder:
    """Feature rows for graph nodes plus on-the-fly rows for new incidents."""

    def __init__(self, featurizer: NodeFeaturizer, features: NodeFeatures):
        self.featurizer = featurizer
        self.features = features
        self._aligned: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def graph_matrix(self, graph: HeteroGraph) -> tuple[np.ndarray, np.ndarray]:
        key = id(graph)
        if key not in self._aligned:
            self._aligned[key] = aligned_features(self.features, graph.nodes)
        return self._aligned[key]

    def incident_vector(self, query: Query) -> np.ndarray:
        return self.featurizer.transform_incident(query.text, query.component_ids)


@dataclass
class QuerySpace:
    """Computation space: the graph plus one temporary node per query."""

    X: np.ndarray
    table: NeighborTable
    query_rows: np.ndarray
    flagged: np.ndarray

    @property
    def n_queries(self) -> int:
        return self.query_rows.size


def prepare_queries(graph: HeteroGraph, builder: IncidentFeatureBuilder, queries: Sequence[Query],
                    n_layers: int, walk_config: WalkConfig, rng: np.random.Generator,
                    extra_rows: Sequence[int] = ()) -> QuerySpace:
    """Attach each query through TAGGED edges and sample every neighborhood it needs.

    ``extra_rows`` are graph nodes to sample alongside the queries (for
    example the engineers being scored).
    """
    X_graph, have = builder.graph_matrix(graph)
    overlay = QueryOverlay(graph, [[component(c) for c in q.component_ids] for q in queries])
    rows = np.vstack([builder.incident_vector(q) for q in queries]) if queries else np.zeros((0, X_graph.shape[1]))
    X = np.vstack([X_graph, rows])
    n_space = overlay.n_real + overlay.n_temp
    query_rows = np.arange(overlay.n_real, n_space, dtype=np.int64)
    seeds = np.concatenate([query_rows, np.asarray(extra_rows, dtype=np.int64)])
    table = sample_table(overlay.indptr, overlay.indices, n_space, seeds, n_layers, walk_config, rng) \
        if n_layers else NeighborTable.empty(n_space)
    reach = seeds
    for _ in range(n_layers):
        reach = np.union1d(reach, table.neighbors_of(reach))
    reach = reach[reach < overlay.n_real]
    lacking = reach[~have[reach]]
    if lacking.size:
        raise KeyError(f"no feature vector for node {graph.nodes[lacking[0]]}")
    attached = np.diff(overlay.indptr[overlay.n_real:]) > 0
    flagged = ~attached & ~np.any(rows != 0, axis=1)
    for q, bad in zip(queries, flagged):
        if bad:
            logger.warning("query %s has no usable text and no known component; low-confidence result",
                           q.incident_id or "<unnamed>")
    return QuerySpace(X, table, query_rows, flagged)


def embed_incident(model: GnnModel, graph: HeteroGraph, features_builder: IncidentFeatureBuilder, query: Query,
                   walk_config: WalkConfig, rng: np.random.Generator) -> np.ndarray:
    space = prepare_queries(graph, features_builder, [query], model.n_layers, walk_config, rng)
    return embed_rows(model, space.X, space.table, space.query_rows)[0]


def build_engineer_index(model: GnnModel, graph: HeteroGraph, features: NodeFeatures, walk_config: WalkConfig,
                         seed: int) -> EngineerIndex:
    ids = [n.key for n in graph.nodes_of(NodeKind.ENGINEER)]
    if not ids:
        return EngineerIndex([], np.zeros((0, model.embed_dim)), model.content_hash())
    X, have = aligned_features(features, graph.nodes)
    rows = np.array([graph.index[engineer(e)] for e in ids], dtype=np.int64)
    rng = np.random.default_rng(seed)
    table = sample_table(graph.indptr, graph.indices, len(graph), rows, model.n_layers, walk_config, rng) \
        if model.n_layers else NeighborTable.empty(len(graph))
    vectors = embed_rows(model, X, table, rows)
    flagged = {e for e, v in zip(ids, vectors) if not np.any(v)}
    return EngineerIndex(ids, vectors, model.content_hash(), flagged)


def _first_hits(scores: np.ndarray, engineer_ids: Sequence[str], truths: Sequence[frozenset[str]]) -> np.ndarray:
    out = np.full(len(truths), np.inf)
    for r, (row, truth) in enumerate(zip(scores, truths)):
        for pos, eid in enumerate(RankedList.from_scores(engineer_ids, row).engineer_ids, start=1):
            if eid in truth:
                out[r] = pos
                break
    return out


class GnnRanker(BaseEstimator):
    """Graph-embedding ranker: featurize, build the graph, train, index engineers."""

    name = "gnn"

    def __init__(self, train_config: TrainConfig = TrainConfig(), walk_config: WalkConfig = WalkConfig(),
                 text_dim: int = 256, min_df: int = 2, max_df_ratio: float = 0.9,
                 pretrained_path: str | None = None, n_layers: int = 2, msg_dim: int = 128, hidden_dim: int = 128,
                 embed_dim: int = 64, lam: float = 0.5, seed: int = 0,
                 edge_types: tuple[EdgeType, ...] = ALL_EDGE_TYPES):
        self.train_config = train_config
        self.walk_config = walk_config
        self.text_dim = text_dim
        self.min_df = min_df
        self.max_df_ratio = max_df_ratio
        self.pretrained_path = pretrained_path
        self.n_layers = n_layers
        self.msg_dim = msg_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.lam = lam
        self.seed = seed
        self.edge_types = edge_types

    def fit(self, corpus: Corpus, val_corpus: Corpus | None = None, model: GnnModel | None = None):
        from .evalbench import make_eval_cases

        self.featurizer_ = NodeFeaturizer(self.text_dim, self.min_df, self.max_df_ratio, self.seed,
                                          self.pretrained_path).fit(corpus)
        self.features_ = self.featurizer_.transform(corpus)
        self.graph_ = build_graph(corpus, self.edge_types)
        self.builder_ = IncidentFeatureBuilder(self.featurizer_, self.features_)
        if model is None:
            model = init_model(self.features_.dim, self.n_layers, self.msg_dim, self.hidden_dim,
                               self.embed_dim, seed=self.seed)
        validate = None
        if val_corpus is not None and val_corpus.incidents:
            cases = make_eval_cases(val_corpus, corpus.engineer_ids)
            sample = self.train_config.val_sample
            if sample and sample < len(cases):
                pick = np.sort(np.random.default_rng(self.seed).choice(len(cases), size=sample, replace=False))
                cases = [cases[i] for i in pick]
            if cases:
                validate = self._validator(cases, model.n_layers)
        self.model_, self.history_ = train(model, self.graph_, self.features_, corpus, val_corpus,
                                           self.train_config, validate, self.walk_config)
        self.index_ = build_engineer_index(self.model_, self.graph_, self.features_, self.walk_config, self.seed)
        return self

    def _validator(self, cases, n_layers):
        ids = [n.key for n in self.graph_.nodes_of(NodeKind.ENGINEER)]
        eng_rows = np.array([self.graph_.index[engineer(e)] for e in ids], dtype=np.int64)
        space = prepare_queries(self.graph_, self.builder_, [c.query for c in cases], n_layers,
                                self.walk_config, np.random.default_rng(self.seed), eng_rows)
        targets = np.concatenate([eng_rows, space.query_rows])
        truths = [c.truth for c in cases]
        k = self.train_config.eval_k

        def validate(model: GnnModel) -> float:
            emb = embed_rows(model, space.X, space.table, targets)
            scores = emb[len(ids):] @ emb[: len(ids)].T
            return float(np.mean(_first_hits(scores, ids, truths) <= k))

        return validate

    @classmethod
    def from_parts(cls, model: GnnModel, featurizer: NodeFeaturizer, corpus: Corpus, **params) -> "GnnRanker":
        """Ranker around an already trained model (no training)."""
        self = cls(**params)
        self.featurizer_ = featurizer
        self.features_ = featurizer.transform(corpus)
        self.graph_ = build_graph(corpus, self.edge_types)
        self.builder_ = IncidentFeatureBuilder(featurizer, self.features_)
        self.model_, self.history_ = model, TrainHistory()
        self.index_ = build_engineer_index(model, self.graph_, self.features_, self.walk_config, self.seed)
        return self

    def embed_queries(self, queries: Sequence[Query]) -> np.ndarray:
        check_is_fitted(self, "index_")
        space = prepare_queries(self.graph_, self.builder_, queries, self.model_.n_layers, self.walk_config,
                                np.random.default_rng(self.seed))
        return embed_rows(self.model_, space.X, space.table, space.query_rows)

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]:
        if not queries:
            return []
        out = []
        for q, emb in zip(queries, self.embed_queries(queries)):
            swarm = [self.index_[e] for e in q.current_swarm if e in self.index_.position]
            out.append(rank_engineers(combine_with_swarm(emb, swarm, self.lam), self.index_, q.current_swarm))
        return out

    def rank(self, query: Query) -> RankedList:
        return self.rank_many([query])[0]

    def kba_scores(self, query: Query, top: int | None = None) -> list[tuple[str, float]]:
        """KBAs by similarity to the query embedding; a diagnostic, not used for ranking."""
        check_is_fitted(self, "index_")
        if not hasattr(self, "kba_vectors_"):
            nodes = self.graph_.nodes_of(NodeKind.KBA)
            emb = embed_nodes(self.model_, self.graph_, self.features_, nodes, self.walk_config,
                              np.random.default_rng(self.seed)) if nodes else {}
            self.kba_ids_ = [n.key for n in nodes]
            self.kba_vectors_ = np.array([emb[n] for n in nodes]).reshape(len(nodes), self.model_.embed_dim)
        if not self.kba_ids_:
            return []
        ranked = RankedList.from_scores(self.kba_ids_, self.kba_vectors_ @ self.embed_queries([query])[0])
        return list(ranked.entries[:top])
