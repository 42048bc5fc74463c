"""Non-graph rankers used as benchmark references.

All rankers follow the same small protocol: ``fit(train_corpus)`` then
``rank(query)`` / ``rank_many(queries)`` returning :class:`RankedList`.
Nothing outside the corpus passed to ``fit`` is ever read.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .featurize import Vocabulary, corpus_documents, fit_vocabulary, tfidf_matrix
from .ingest import Corpus
from .rank import Query, RankedList


class Ranker(BaseEstimator):
    name = "ranker"

    def rank(self, query: Query) -> RankedList:
        return self.rank_many([query])[0]

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]:
        raise NotImplementedError


@dataclass
class EngineerDocProfile:
    """TF-IDF rows of every document attributed to an engineer, grouped by owner."""

    engineer_ids: list[str]
    matrix: sp.csr_matrix
    owner: np.ndarray

    @classmethod
    def build(cls, corpus: Corpus, vocab: Vocabulary) -> "EngineerDocProfile":
        ids = list(corpus.engineer_ids)
        docs, owner = [], []
        for i, eid in enumerate(ids):
            for kid in corpus.kbas_by.get(eid, ()):
                docs.append(corpus.kba_by_id[kid].full_text)
                owner.append(i)
            for iid in corpus.processed_by.get(eid, ()):
                docs.append(corpus.incident_by_id[iid].text)
                owner.append(i)
        return cls(ids, tfidf_matrix(vocab, docs), np.asarray(owner, dtype=np.int64))

    def pooled_similarity(self, queries: sp.csr_matrix, pooling: str = "max") -> np.ndarray:
        """(n_queries, n_engineers) cosine similarity pooled over each engineer's documents."""
        out = np.zeros((queries.shape[0], len(self.engineer_ids)))
        if self.owner.size == 0:
            return out
        sims = np.asarray((queries @ self.matrix.T).todense())
        starts = np.flatnonzero(np.r_[True, np.diff(self.owner) != 0])
        owners = self.owner[starts]
        if pooling == "max":
            out[:, owners] = np.maximum.reduceat(sims, starts, axis=1)
        elif pooling == "mean":
            sizes = np.diff(np.r_[starts, self.owner.size])
            out[:, owners] = np.add.reduceat(sims, starts, axis=1) / sizes
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
        return out


def tfidf_rank(profiles: EngineerDocProfile, vocab: Vocabulary, query_text: str,
               query_components: Sequence[str] = (), pooling: str = "max") -> RankedList:
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    scores = profiles.pooled_similarity(tfidf_matrix(vocab, [query_text]), pooling)[0]
    return RankedList.from_scores(profiles.engineer_ids, scores)


class TfidfRanker(Ranker):
    """Engineers scored by their best-matching historical document."""

    name = "tfidf"

    def __init__(self, min_df: int = 2, max_df_ratio: float = 0.9, pooling: str = "max"):
        self.min_df = min_df
        self.max_df_ratio = max_df_ratio
        self.pooling = pooling

    def fit(self, corpus: Corpus, y=None):
        self.vocabulary_ = fit_vocabulary(corpus_documents(corpus), self.min_df, self.max_df_ratio)
        self.profiles_ = EngineerDocProfile.build(corpus, self.vocabulary_)
        return self

    def scores(self, queries: Sequence[Query]) -> np.ndarray:
        check_is_fitted(self, "profiles_")
        q = tfidf_matrix(self.vocabulary_, [query.text for query in queries])
        return self.profiles_.pooled_similarity(q, self.pooling)

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]:
        ids = self.profiles_.engineer_ids if hasattr(self, "profiles_") else []
        return [RankedList.from_scores(ids, s, q.current_swarm) for q, s in zip(queries, self.scores(queries))]


@dataclass(frozen=True)
class StaticWeights:
    w_solved: float = 1.0
    w_kba: float = 0.5
    w_text: float = 1.0
    w_recency: float = 0.5
    half_life_days: float = 90.0

    def __post_init__(self):
        values = (self.w_solved, self.w_kba, self.w_text, self.w_recency, self.half_life_days)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("weights must be finite")
        if self.half_life_days <= 0:
            raise ValueError("half-life must be positive")


class WeightedFeatureRanker(Ranker):
    """Fixed linear blend of solved counts, KBA counts, text match and recency."""

    name = "weighted"

    def __init__(self, weights: StaticWeights = StaticWeights(), min_df: int = 2, max_df_ratio: float = 0.9):
        self.weights = weights
        self.min_df = min_df
        self.max_df_ratio = max_df_ratio

    def fit(self, corpus: Corpus, y=None):
        self.engineer_ids_ = list(corpus.engineer_ids)
        pos = {e: i for i, e in enumerate(self.engineer_ids_)}
        comp_pos = {c: j for j, c in enumerate(corpus.component_ids)}
        solved = np.zeros((len(pos), len(comp_pos)))
        kbas = np.zeros_like(solved)
        last = [None] * len(pos)

        def touch(eid, date):
            i = pos[eid]
            if last[i] is None or date > last[i]:
                last[i] = date

        for inc in corpus.incidents:
            if inc.resolver_id is not None:
                for cid in inc.component_ids:
                    solved[pos[inc.resolver_id], comp_pos[cid]] += 1
            for eid in inc.processor_ids:
                touch(eid, inc.created_date)
        for kba in corpus.kbas:
            for eid in kba.author_ids:
                kbas[pos[eid], comp_pos[kba.component_id]] += 1
                touch(eid, kba.created_date)
        for s in corpus.swarms:
            for eid in s.members:
                touch(eid, s.created_date)

        dates = [d for d in last if d is not None]
        self.reference_date_ = max(dates) if dates else None
        self.solved_, self.kbas_, self.last_activity_ = solved, kbas, last
        self.component_position_ = comp_pos
        if self.weights.w_text != 0:
            self.text_ = TfidfRanker(self.min_df, self.max_df_ratio).fit(corpus)
        else:
            self.text_ = None
        return self

    def _component_counts(self, table: np.ndarray, components: Sequence[str]) -> np.ndarray:
        cols = [self.component_position_[c] for c in components if c in self.component_position_]
        return table[:, cols].sum(axis=1) if cols else np.zeros(table.shape[0])

    def recency(self, when) -> np.ndarray:
        ref = when or self.reference_date_
        out = np.zeros(len(self.engineer_ids_))
        for i, d in enumerate(self.last_activity_):
            if d is not None and ref is not None:
                days = max((ref - d).days, 0)
                out[i] = math.exp(-days * math.log(2) / self.weights.half_life_days)
        return out

    def scores(self, queries: Sequence[Query]) -> np.ndarray:
        check_is_fitted(self, "solved_")
        w = self.weights
        text = self.text_.scores(queries) if self.text_ is not None else np.zeros((len(queries), len(self.engineer_ids_)))
        out = np.zeros((len(queries), len(self.engineer_ids_)))
        for r, q in enumerate(queries):
            out[r] = (w.w_solved * np.log1p(self._component_counts(self.solved_, q.component_ids))
                      + w.w_kba * np.log1p(self._component_counts(self.kbas_, q.component_ids))
                      + w.w_text * text[r]
                      + w.w_recency * self.recency(q.created_date))
        return out

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]:
        return [RankedList.from_scores(self.engineer_ids_, s, q.current_swarm)
                for q, s in zip(queries, self.scores(queries))]


def popularity_rank(corpus: Corpus) -> RankedList:
    solved = Counter({e: len(v) for e, v in corpus.resolved_by.items()})
    ids = list(corpus.engineer_ids)
    return RankedList.from_scores(ids, np.array([solved[e] for e in ids], dtype=float))


def random_rank(engineer_ids: Sequence[str], rng: np.random.Generator) -> RankedList:
    ids = sorted(engineer_ids)
    perm = rng.permutation(len(ids))
    scores = np.empty(len(ids))
    scores[perm] = np.arange(len(ids), 0, -1, dtype=float)
    return RankedList.from_scores(ids, scores)


class PopularityRanker(Ranker):
    name = "popularity"

    def fit(self, corpus: Corpus, y=None):
        self.ranking_ = popularity_rank(corpus)
        return self

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]:
        check_is_fitted(self, "ranking_")
        out = []
        for q in queries:
            skip = set(q.current_swarm)
            out.append(RankedList(tuple(e for e in self.ranking_.entries if e[0] not in skip)))
        return out


class RandomRanker(Ranker):
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def fit(self, corpus: Corpus, y=None):
        self.engineer_ids_ = list(corpus.engineer_ids)
        return self

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]:
        check_is_fitted(self, "engineer_ids_")
        rng = np.random.default_rng(self.seed)
        out = []
        for q in queries:
            ranked = random_rank(self.engineer_ids_, rng)
            skip = set(q.current_swarm)
            out.append(RankedList(tuple(e for e in ranked.entries if e[0] not in skip)))
        return out
