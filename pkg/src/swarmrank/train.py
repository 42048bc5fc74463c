"""Triplet construction and minibatch gradient descent for the GNN ranker."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import NumericalError
from .featurize import NodeFeatures
from .gnn import (
    CheckDims, GnnModel, NeighborTable, aligned_features, forward_backward, gradient_check, sample_table,
    triplet_loss,
)
from .ingest import Corpus, read_kv_file
from .kgraph import EdgeType, HeteroGraph, NodeId, NodeKind, QueryOverlay, WalkConfig, engineer, incident, neighbors

logger = logging.getLogger(__name__)

__all__ = ["Triplet", "TrainConfig", "TrainHistory", "make_triplets", "train", "triplet_loss"]

QUERY_MODES = ("graph", "inductive")


class Triplet(tuple):
    """``(query incident, positive engineer, negative engineer)`` node ids."""

    __slots__ = ()

    def __new__(cls, query: NodeId, positive: NodeId, negative: NodeId):
        if positive == negative:
            raise ValueError("positive and negative must differ")
        return super().__new__(cls, (query, positive, negative))

    query = property(lambda self: self[0])
    positive = property(lambda self: self[1])
    negative = property(lambda self: self[2])


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 128
    negatives_per_positive: int = 5
    hard_negative_fraction: float = 0.5
    seed: int = 0
    patience: int = 5
    eval_k: int = 50
    # how training incidents are embedded: their real graph node, or a
    # component-only temporary node exactly as at query time
    query_mode: str = "graph"
    # validation cases scored per epoch (0 = all)
    val_sample: int = 0

    def __post_init__(self):
        for name in ("margin", "learning_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number")
        for name in ("batch_size", "negatives_per_positive", "eval_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.patience < 1 or self.val_sample < 0:
            raise ValueError("epochs must be >= 0, patience >= 1 and val_sample >= 0")
        if not 0.0 <= self.hard_negative_fraction <= 1.0:
            raise ValueError("hard_negative_fraction must lie in [0, 1]")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown training keys: {', '.join(sorted(unknown))}")
        cast = {"float": float, "int": int, "str": str}
        return cls(**{k: cast[types[k]](v) for k, v in values.items()})

    @classmethod
    def read(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(read_kv_file(path))

    def to_lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_hit: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        rows = ["epoch,loss,val_hit,seconds"]
        rows += [f"{r.epoch},{r.loss!r},{r.val_hit!r},{r.seconds:.3f}" for r in self.records]
        return "\n".join(rows) + "\n"


# --------------------------------------------------------------------------
# triplets


def positive_pairs(corpus: Corpus) -> list[tuple[str, list[str]]]:
    """Per incident (file order): resolver first, then swarm responders in order, deduplicated."""
    out = []
    for inc in corpus.incidents:
        pos = [inc.resolver_id] if inc.resolver_id else []
        for sid in corpus.swarms_of.get(inc.incident_id, ()):
            pos += corpus.swarm_by_id[sid].responder_ids
        pos = list(dict.fromkeys(pos))
        if pos:
            out.append((inc.incident_id, pos))
    return out


def make_triplets(train_corpus: Corpus, graph: HeteroGraph, config: TrainConfig,
                  rng: np.random.Generator) -> list[Triplet]:
    """Draw ``negatives_per_positive`` negatives for every positive pair.

    Per positive, ``round(n * hard_negative_fraction)`` negatives come uniformly
    (with replacement) from engineers rated on one of the incident's
    components, the rest from all non-positive engineers. An empty hard pool
    falls back to the general pool.
    """
    if not train_corpus.incidents:
        raise ValueError("training split is empty")
    engineers = sorted(n.key for n in graph.nodes_of(NodeKind.ENGINEER))
    rated = {c: set() for c in train_corpus.component_ids}
    for e in train_corpus.engineers:
        for c in e.expertise:
            rated.setdefault(c, set()).add(e.engineer_id)
    n_hard = round(config.negatives_per_positive * config.hard_negative_fraction)
    n_easy = config.negatives_per_positive - n_hard
    out: list[Triplet] = []
    for iid, pos in positive_pairs(train_corpus):
        positive = set(pos)
        pool = [e for e in engineers if e not in positive]
        if not pool:
            logger.warning("incident %s: every engineer is a positive; skipped", iid)
            continue
        comps = train_corpus.incident_by_id[iid].component_ids
        hard = [e for e in pool if any(e in rated.get(c, ()) for c in comps)] or pool
        for p in pos:
            negs = [hard[j] for j in rng.integers(len(hard), size=n_hard)] if n_hard else []
            negs += [pool[j] for j in rng.integers(len(pool), size=n_easy)] if n_easy else []
            out += [Triplet(incident(iid), engineer(p), engineer(n)) for n in negs]
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingSpace:
    """Feature rows and cached neighborhoods for every node a triplet can touch."""

    X: np.ndarray
    table: NeighborTable
    rows: dict[NodeId, int]

    def encode(self, triplets: Sequence[Triplet]) -> np.ndarray:
        return np.array([[self.rows[t[0]], self.rows[t[1]], self.rows[t[2]]] for t in triplets],
                        dtype=np.int64).reshape(-1, 3)


def build_training_space(graph: HeteroGraph, features: NodeFeatures, triplets: Sequence[Triplet],
                         n_layers: int, query_mode: str, walk_config: WalkConfig,
                         rng: np.random.Generator) -> TrainingSpace:
    X, have = aligned_features(features, graph.nodes)
    rows = dict(graph.index)
    indptr, indices = graph.indptr, graph.indices
    if query_mode == "inductive":
        queries = sorted({t.query for t in triplets})
        overlay = QueryOverlay(graph, [neighbors(graph, q, EdgeType.TAGGED) for q in queries])
        indptr, indices = overlay.indptr, overlay.indices
        X = np.vstack([X, X[[graph.index[q] for q in queries]]]) if queries else X
        have = np.concatenate([have, np.ones(len(queries), dtype=bool)])
        rows.update({q: overlay.temp_index(j) for j, q in enumerate(queries)})
    seeds = np.unique(np.array([rows[n] for t in triplets for n in t], dtype=np.int64))
    n_space = len(indptr) - 1
    table = sample_table(indptr, indices, n_space, seeds, n_layers, walk_config, rng) if n_layers \
        else NeighborTable.empty(n_space)
    reach = seeds
    for _ in range(n_layers):
        reach = np.union1d(reach, table.neighbors_of(reach))
    lacking = reach[~have[reach]]
    if lacking.size:
        raise KeyError(f"no feature vector for node {graph.nodes[lacking[0]]}")
    return TrainingSpace(X, table, rows)


def startup_check(seed: int, tolerance: float = 1e-4) -> float:
    err = gradient_check(CheckDims(), seed=seed)
    if not err < tolerance:
        raise NumericalError(f"gradient check failed at startup: relative error {err:.3e}")
    return err


def train(
    model: GnnModel,
    graph: HeteroGraph,
    features: NodeFeatures,
    train_corpus: Corpus,
    val_corpus: Corpus | None,
    config: TrainConfig,
    validate: Callable[[GnnModel], float] | None = None,
    walk_config: WalkConfig = WalkConfig(),
) -> tuple[GnnModel, TrainHistory]:
    """Plain minibatch gradient descent on the triplet hinge loss.

    ``validate`` maps a model to its validation hit@eval_k; without it (or
    without validation cases) the last epoch's model is returned.
    """
    history = TrainHistory()
    model = model.copy()
    if config.epochs == 0:
        return model, history
    startup_check(config.seed)
    rng = np.random.default_rng(config.seed)
    triplets = make_triplets(train_corpus, graph, config, rng)
    if not triplets:
        raise ValueError("no training triplets could be formed")
    space = build_training_space(graph, features, triplets, model.n_layers, config.query_mode, walk_config, rng)
    encoded = space.encode(triplets)
    logger.info("training on %d triplets", len(encoded))
    has_val = validate is not None and val_corpus is not None and len(val_corpus.incidents) > 0
    best, best_val, stale = model.copy(), -math.inf, 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(encoded))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = encoded[order[start:start + config.batch_size]]
            loss, grads = forward_backward(model, space.X, space.table, batch, config.margin)
            if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())):
                shown = [tuple(str(n) for n in triplets[i]) for i in order[start:start + min(5, config.batch_size)]]
                raise NumericalError(f"non-finite loss {loss} in epoch {epoch}, batch at {start}; first triplets {shown}")
            model.apply_update(grads, config.learning_rate)
            total += loss * len(batch)
        mean_loss = total / len(encoded)
        val_hit = float(validate(model)) if has_val else math.nan
        history.records.append(EpochRecord(epoch, mean_loss, val_hit, time.perf_counter() - t0))
        logger.info("epoch %d loss %.5f val_hit %.4f (%.1fs)", epoch, mean_loss, val_hit, history.records[-1].seconds)
        if not has_val:
            best, history.best_epoch = model.copy(), epoch
            continue
        if val_hit > best_val:
            best, best_val, stale, history.best_epoch = model.copy(), val_hit, 0, epoch
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("no validation improvement for %d epochs; stopping", stale)
                break
    return best, history
