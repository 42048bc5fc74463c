"""Text and component featurization for graph nodes.

Documents are tokenized into lowercase alphanumeric runs, weighted by
smoothed TF-IDF, and folded into a fixed width with signed feature hashing.
Component tags become multi-hot columns. The per-node input vector is
``[text block | component block | stats block]``.
"""
from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError
from .ingest import RATING_MAX, Corpus, authored_text
from .kgraph import NodeId, NodeKind

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[^\W_]+")
N_STATS = 3


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN.findall(text.lower()) if len(t) >= 2]


# --------------------------------------------------------------------------
# vocabulary and tf-idf


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    document_frequency: np.ndarray
    n_docs: int
    min_df: int
    max_df_ratio: float
    index: dict[str, int] = field(init=False, repr=False, compare=False)
    idf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.terms)})
        idf = np.log((1.0 + self.n_docs) / (1.0 + self.document_frequency)) + 1.0
        object.__setattr__(self, "idf", idf)

    def __len__(self) -> int:
        return len(self.terms)

    def content_hash(self) -> str:
        h = hashlib.sha256(f"{self.n_docs}|{self.min_df}|{self.max_df_ratio}".encode())
        for term, df in zip(self.terms, self.document_frequency.tolist()):
            h.update(f"{term}:{df}\n".encode())
        return h.hexdigest()[:16]

    def to_lines(self) -> list[str]:
        head = f"# n_docs={self.n_docs} min_df={self.min_df} max_df_ratio={self.max_df_ratio!r}"
        return [head] + [f"{t}\t{df}" for t, df in zip(self.terms, self.document_frequency.tolist())]

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "Vocabulary":
        meta = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
        terms, dfs = [], []
        for line in lines[1:]:
            if line:
                term, df = line.split("\t")
                terms.append(term)
                dfs.append(int(df))
        return cls(tuple(terms), np.asarray(dfs, dtype=np.int64), int(meta["n_docs"]),
                   int(meta["min_df"]), float(meta["max_df_ratio"]))


def fit_vocabulary(documents: Sequence[str], min_df: int = 1, max_df_ratio: float = 1.0) -> Vocabulary:
    """Keep terms with ``min_df <= df`` and ``df / n_docs <= max_df_ratio``; index lexicographically."""
    if not documents:
        raise DataError("cannot fit a vocabulary on zero documents")
    df: Counter[str] = Counter()
    for doc in documents:
        df.update(set(tokenize(doc)))
    n = len(documents)
    terms = sorted(t for t, c in df.items() if c >= min_df and c / n <= max_df_ratio)
    if not terms:
        raise DataError("vocabulary is empty after document-frequency filtering")
    return Vocabulary(tuple(terms), np.array([df[t] for t in terms], dtype=np.int64), n, min_df, max_df_ratio)


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    weights: np.ndarray
    dimension: int

    def __post_init__(self):
        if self.indices.size and (np.any(np.diff(self.indices) <= 0) or self.indices[-1] >= self.dimension):
            raise ValueError("sparse indices must be strictly increasing and below the dimension")
        if np.any(self.weights == 0):
            raise ValueError("zero weights must not be stored")

    @property
    def is_zero(self) -> bool:
        return self.indices.size == 0

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.weights, self.weights)))

    def dot(self, other: "SparseVector") -> float:
        common, ia, ib = np.intersect1d(self.indices, other.indices, assume_unique=True, return_indices=True)
        return float(np.dot(self.weights[ia], other.weights[ib]))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.indices] = self.weights
        return out


def _tfidf_parts(vocab: Vocabulary, document: str) -> tuple[np.ndarray, np.ndarray]:
    counts = Counter(t for t in tokenize(document) if t in vocab.index)
    if not counts:
        return np.empty(0, dtype=np.int64), np.empty(0)
    idx = np.array(sorted(vocab.index[t] for t in counts), dtype=np.int64)
    tf = np.array([counts[vocab.terms[i]] for i in idx], dtype=float)
    w = tf * vocab.idf[idx]
    return idx, w / np.sqrt(np.dot(w, w))


def tfidf_vector(vocab: Vocabulary, document: str) -> SparseVector:
    """Raw-count tf times smoothed idf, L2-normalized; OOV terms ignored."""
    idx, w = _tfidf_parts(vocab, document)
    return SparseVector(idx, w, len(vocab))


def tfidf_matrix(vocab: Vocabulary, documents: Iterable[str]) -> sp.csr_matrix:
    indptr, indices, data = [0], [], []
    for doc in documents:
        idx, w = _tfidf_parts(vocab, doc)
        indices.append(idx)
        data.append(w)
        indptr.append(indptr[-1] + idx.size)
    n = len(indptr) - 1
    return sp.csr_matrix(
        (np.concatenate(data) if data else np.empty(0),
         np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
         np.asarray(indptr)),
        shape=(n, len(vocab)),
    )


class TextVectorizer(TransformerMixin, BaseEstimator):
    """Thin estimator wrapper around :func:`fit_vocabulary` and :func:`tfidf_matrix`."""

    def __init__(self, min_df: int = 1, max_df_ratio: float = 1.0):
        self.min_df = min_df
        self.max_df_ratio = max_df_ratio

    def fit(self, documents, y=None):
        self.vocabulary_ = fit_vocabulary(list(documents), self.min_df, self.max_df_ratio)
        return self

    def transform(self, documents) -> sp.csr_matrix:
        check_is_fitted(self, "vocabulary_")
        return tfidf_matrix(self.vocabulary_, documents)


# --------------------------------------------------------------------------
# signed feature hashing


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def hash_buckets(indices: np.ndarray, p: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Bucket in ``[0, p)`` and sign in ``{-1, +1}`` for each vocabulary index."""
    with np.errstate(over="ignore"):
        key = np.asarray(indices, dtype=np.uint64) ^ (np.uint64(seed & 0xFFFFFFFF) << np.uint64(32))
    h = _mix64(key)
    bucket = (h % np.uint64(p)).astype(np.int64)
    sign = np.where((h >> np.uint64(63)) == 1, -1.0, 1.0)
    return bucket, sign


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def project_text(sparse: SparseVector, p: int, seed: int, normalize: bool = True) -> np.ndarray:
    if p < 1:
        raise ValueError("projection dimension must be >= 1")
    out = np.zeros(p)
    if not sparse.is_zero:
        bucket, sign = hash_buckets(sparse.indices, p, seed)
        np.add.at(out, bucket, sign * sparse.weights)
    return _unit_rows(out) if normalize else out


def projection_matrix(dimension: int, p: int, seed: int) -> sp.csr_matrix:
    bucket, sign = hash_buckets(np.arange(dimension), p, seed)
    return sp.csr_matrix((sign, (np.arange(dimension), bucket)), shape=(dimension, p))


def project_rows(x: sp.spmatrix, p: int, seed: int) -> np.ndarray:
    """Row-wise :func:`project_text` for a document-term matrix."""
    return _unit_rows(np.asarray((x @ projection_matrix(x.shape[1], p, seed)).todense()))


# --------------------------------------------------------------------------
# components


@dataclass(frozen=True)
class ComponentEncoder:
    component_ids: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {c: i for i, c in enumerate(self.component_ids)})

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "ComponentEncoder":
        return cls(tuple(sorted(corpus.component_ids)))

    def __len__(self) -> int:
        return len(self.component_ids)


def one_hot_components(encoder: ComponentEncoder, component_ids: Iterable[str]) -> np.ndarray:
    out = np.zeros(len(encoder))
    for cid in component_ids:
        j = encoder.index.get(cid)
        if j is None:
            logger.warning("ignoring unknown component %r", cid)
        else:
            out[j] = 1.0
    return out


# --------------------------------------------------------------------------
# node features


@dataclass
class NodeFeatures:
    nodes: list[NodeId]
    matrix: np.ndarray
    text_dim: int
    n_components: int
    n_stats: int = N_STATS
    flagged: set[NodeId] = field(default_factory=set)

    def __post_init__(self):
        self.index = {n: i for i, n in enumerate(self.nodes)}

    @property
    def dim(self) -> int:
        return self.text_dim + self.n_components + self.n_stats

    def __getitem__(self, node: NodeId) -> np.ndarray:
        return self.matrix[self.index[node]]

    def __contains__(self, node: NodeId) -> bool:
        return node in self.index


def load_pretrained(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``node_id<TAB>v1 v2 ...`` lines; every vector must share one width."""
    out, dim = {}, None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            key, values = line.split("\t", 1)
            vec = np.array([float(v) for v in values.split()])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed embedding line") from exc
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise DataError(f"{path}:{lineno}: dimension {vec.size} != {dim}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}:{lineno}: non-finite entries")
        out[key] = vec
    return out


def corpus_documents(corpus: Corpus) -> list[str]:
    """The union text corpus the vocabulary is fitted on."""
    return (
        [inc.text for inc in corpus.incidents]
        + [kba.full_text for kba in corpus.kbas]
        + [c.description for c in corpus.components]
    )


def engineer_stats(corpus: Corpus, engineer_id: str) -> np.ndarray:
    return np.log1p([
        len(corpus.resolved_by.get(engineer_id, ())),
        len(corpus.kbas_by.get(engineer_id, ())),
        len(corpus.swarms_joined.get(engineer_id, ())),
    ])


def engineer_documents(corpus: Corpus, engineer_id: str) -> list[str]:
    """KBAs the engineer wrote plus, per processed incident, the messages they wrote."""
    docs = [corpus.kba_by_id[k].full_text for k in corpus.kbas_by.get(engineer_id, ())]
    for iid in corpus.processed_by.get(engineer_id, ()):
        text = authored_text(corpus.incident_by_id[iid].communication_summary, engineer_id)
        if text:
            docs.append(text)
    return docs


def build_node_features(
    corpus: Corpus,
    vocab: Vocabulary,
    encoder: ComponentEncoder,
    p: int,
    seed: int,
    pretrained: Mapping[str, np.ndarray] | None = None,
) -> NodeFeatures:
    C = len(encoder)
    if pretrained:
        p = len(next(iter(pretrained.values())))
    nodes: list[NodeId] = []
    text_docs: list[list[str]] = []
    comp_rows: list[np.ndarray] = []
    stat_rows: list[np.ndarray] = []
    zeros_s = np.zeros(N_STATS)

    for inc in corpus.incidents:
        nodes.append(NodeId(NodeKind.INCIDENT, inc.incident_id))
        text_docs.append([inc.text])
        comp_rows.append(one_hot_components(encoder, inc.component_ids))
        stat_rows.append(zeros_s)
    for kba in corpus.kbas:
        nodes.append(NodeId(NodeKind.KBA, kba.kba_id))
        text_docs.append([kba.full_text])
        comp_rows.append(one_hot_components(encoder, [kba.component_id]))
        stat_rows.append(zeros_s)
    for comp in corpus.components:
        nodes.append(NodeId(NodeKind.COMPONENT, comp.component_id))
        text_docs.append([comp.description])
        comp_rows.append(one_hot_components(encoder, [comp.component_id]))
        stat_rows.append(zeros_s)
    for eng in corpus.engineers:
        nodes.append(NodeId(NodeKind.ENGINEER, eng.engineer_id))
        text_docs.append(engineer_documents(corpus, eng.engineer_id))
        ratings = np.zeros(C)
        for cid, r in eng.expertise.items():
            if cid in encoder.index:
                ratings[encoder.index[cid]] = r / RATING_MAX
        comp_rows.append(ratings)
        stat_rows.append(engineer_stats(corpus, eng.engineer_id))

    # every document is projected once; a node's text block is the mean over its documents
    flat = [d for docs in text_docs for d in docs]
    owner = np.repeat(np.arange(len(nodes)), [len(d) for d in text_docs])
    text = np.zeros((len(nodes), p))
    if pretrained is None:
        projected = project_rows(tfidf_matrix(vocab, flat), p, seed) if flat else np.zeros((0, p))
        np.add.at(text, owner, projected)
        counts = np.array([len(d) for d in text_docs], dtype=float)
        text /= np.maximum(counts, 1.0)[:, None]
    else:
        missing = 0
        for i, node in enumerate(nodes):
            vec = pretrained.get(str(node))
            if vec is None:
                missing += 1
            else:
                text[i] = vec
        if missing:
            logger.warning("%d node(s) have no pretrained vector; their text block is zero", missing)

    matrix = np.hstack([text, np.vstack(comp_rows) if nodes else np.zeros((0, C)),
                        np.vstack(stat_rows) if nodes else np.zeros((0, N_STATS))])
    if not np.all(np.isfinite(matrix)):
        raise DataError("non-finite node features")
    flagged = {n for n, row in zip(nodes, matrix) if not row.any()}
    if flagged:
        logger.info("%d node(s) have an all-zero feature vector", len(flagged))
    return NodeFeatures(nodes, matrix, p, C, N_STATS, flagged)


def incident_feature_vector(
    vocab: Vocabulary, encoder: ComponentEncoder, p: int, seed: int, text: str, component_ids: Sequence[str]
) -> np.ndarray:
    """Feature vector for an incident that is not part of the fitted corpus."""
    text_block = project_text(tfidf_vector(vocab, text), p, seed)
    return np.concatenate([text_block, one_hot_components(encoder, component_ids), np.zeros(N_STATS)])


class NodeFeaturizer(BaseEstimator):
    """Fits the vocabulary and component encoder on a corpus and emits node features."""

    def __init__(self, text_dim: int = 256, min_df: int = 2, max_df_ratio: float = 0.9,
                 seed: int = 0, pretrained_path: str | None = None):
        self.text_dim = text_dim
        self.min_df = min_df
        self.max_df_ratio = max_df_ratio
        self.seed = seed
        self.pretrained_path = pretrained_path

    def fit(self, corpus: Corpus, y=None):
        if self.text_dim < 1:
            raise ValueError("text_dim must be >= 1")
        self.vocabulary_ = fit_vocabulary(corpus_documents(corpus), self.min_df, self.max_df_ratio)
        self.encoder_ = ComponentEncoder.from_corpus(corpus)
        self.pretrained_ = load_pretrained(self.pretrained_path) if self.pretrained_path else None
        return self

    def transform(self, corpus: Corpus) -> NodeFeatures:
        check_is_fitted(self, "vocabulary_")
        return build_node_features(corpus, self.vocabulary_, self.encoder_, self.text_dim, self.seed,
                                   self.pretrained_)

    def fit_transform(self, corpus: Corpus, y=None) -> NodeFeatures:
        return self.fit(corpus).transform(corpus)

    def transform_incident(self, text: str, component_ids: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "vocabulary_")
        if self.pretrained_:
            p = len(next(iter(self.pretrained_.values())))
            return np.concatenate([np.zeros(p), one_hot_components(self.encoder_, component_ids), np.zeros(N_STATS)])
        return incident_feature_vector(self.vocabulary_, self.encoder_, self.text_dim, self.seed, text, component_ids)
