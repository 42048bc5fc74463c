"""Engineer recommendation for support incidents over a heterogeneous knowledge graph."""
from .baselines import PopularityRanker, RandomRanker, TfidfRanker, WeightedFeatureRanker
from .config import RunConfig, load_config
from .evalbench import EvalCase, HitReport, compare, evaluate, hit_at_k, make_eval_cases
from .exceptions import ArtifactMismatchError, DataError, NumericalError, SwarmRankError
from .featurize import NodeFeaturizer, TextVectorizer, fit_vocabulary, tfidf_vector
from .gnn import GnnModel, convolve, embed_nodes, forward_backward, gradient_check, init_model
from .ingest import Corpus, join_corpus, load_corpus, load_manifest, split_by_time
from .kgraph import HeteroGraph, NodeId, WalkConfig, build_graph, sample_importance_neighborhood
from .rank import EngineerIndex, GnnRanker, Query, RankedList, combine_with_swarm, rank_engineers
from .synthgen import OracleRanker, SynthConfig, generate
from .train import TrainConfig, make_triplets, train, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "ArtifactMismatchError", "Corpus", "DataError", "EngineerIndex", "EvalCase", "GnnModel", "GnnRanker",
    "HeteroGraph", "HitReport", "NodeFeaturizer", "NodeId", "NumericalError", "OracleRanker", "PopularityRanker",
    "Query", "RandomRanker", "RankedList", "RunConfig", "SwarmRankError", "SynthConfig", "TextVectorizer",
    "TfidfRanker", "TrainConfig", "WalkConfig", "WeightedFeatureRanker", "build_graph", "combine_with_swarm",
    "compare", "convolve", "embed_nodes", "evaluate", "fit_vocabulary", "forward_backward", "generate",
    "gradient_check", "hit_at_k", "init_model", "join_corpus", "load_config", "load_corpus", "load_manifest",
    "make_eval_cases", "make_triplets", "rank_engineers", "sample_importance_neighborhood", "split_by_time",
    "tfidf_vector", "train", "triplet_loss",
]
