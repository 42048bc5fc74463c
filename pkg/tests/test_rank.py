import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.exceptions import NotFittedError

from swarmrank.featurize import NodeFeaturizer
from swarmrank.gnn import embed_nodes, init_model
from swarmrank.kgraph import WalkConfig, build_graph, incident
from swarmrank.rank import (
    EngineerIndex, GnnRanker, IncidentFeatureBuilder, Query, RankedList, build_engineer_index, combine_with_swarm,
    embed_incident, prepare_queries, rank_engineers,
)
from swarmrank.train import TrainConfig

SMALL_WALK = WalkConfig(walk_count=20, walk_length=2, neighborhood_size=4)


def test_ranked_list_ties_break_by_id():
    rl = RankedList.from_scores(["b", "a", "c", "d"], np.array([1.0, 1.0, 2.0, 0.5]))
    assert rl.engineer_ids == ["c", "a", "b", "d"]
    assert rl.top_k(2) == ["c", "a"]
    assert rl.to_csv(2).splitlines() == ["rank,engineer_id,score", "1,c,2.000000", "2,a,1.000000"]


def test_ranked_list_rejects_bad_scores():
    with pytest.raises(ValueError):
        RankedList.from_scores(["a"], np.array([np.nan]))
    with pytest.raises(ValueError):
        RankedList.from_scores(["a", "b"], np.array([1.0]))


_scores = st.lists(st.integers(-3, 3).map(float), min_size=1, max_size=12)


@settings(max_examples=80)
@given(_scores)
def test_ranked_list_is_sorted_permutation(scores):
    ids = [f"e{j:02d}" for j in range(len(scores))][::-1]
    rl = RankedList.from_scores(ids, np.array(scores))
    assert sorted(rl.engineer_ids) == sorted(ids)
    # brute-force ordering: score descending, id ascending
    assert rl.entries == tuple(sorted(zip(ids, scores), key=lambda p: (-p[1], p[0])))


@settings(max_examples=50)
@given(_scores, st.floats(0.1, 5.0), st.floats(-5.0, 5.0))
def test_ranking_invariant_under_increasing_transform(scores, a, b):
    ids = [f"e{j}" for j in range(len(scores))]
    base = RankedList.from_scores(ids, np.array(scores)).engineer_ids
    assert RankedList.from_scores(ids, a * np.array(scores) + b).engineer_ids == base
    assert RankedList.from_scores(ids, np.exp(np.array(scores))).engineer_ids == base


@settings(max_examples=50)
@given(_scores, st.integers(1, 12))
def test_top_k_is_prefix(scores, k):
    ids = [f"e{j}" for j in range(len(scores))]
    rl = RankedList.from_scores(ids, np.array(scores))
    assert rl.top_k(k) == rl.engineer_ids[:k]
    assert rl.top_k(k) == rl.top_k(k + 1)[:k]


def test_combine_with_swarm_examples(caplog):
    inc = np.array([1.0, 0.0])
    assert combine_with_swarm(inc, []) is inc
    assert combine_with_swarm(inc, [np.array([0.0, 1.0])], lam=1.0) is inc
    got = combine_with_swarm(inc, [np.array([0.0, 1.0])], lam=0.5)
    assert np.allclose(got, [2 ** -0.5, 2 ** -0.5])
    got = combine_with_swarm(inc, [np.array([0.0, 1.0]), np.array([0.0, -1.0])], lam=0.25)
    assert np.allclose(got, inc)
    assert np.allclose(combine_with_swarm(inc, [np.array([0.0, 1.0])], lam=0.0), [0.0, 1.0])
    assert combine_with_swarm(inc, [np.array([-1.0, 0.0])], lam=0.5) is inc
    assert "cancelled" in caplog.text
    with pytest.raises(ValueError):
        combine_with_swarm(inc, [], lam=1.5)


def test_rank_engineers_against_brute_force():
    rng = np.random.default_rng(0)
    ids = [f"e{j}" for j in range(30)]
    vecs = rng.normal(size=(30, 5))
    q = rng.normal(size=5)
    index = EngineerIndex(ids, vecs)
    rl = rank_engineers(q, index, exclude=["e3", "e7"])
    expected = sorted(((e, float(v @ q)) for e, v in zip(ids, vecs) if e not in ("e3", "e7")),
                      key=lambda p: (-p[1], p[0]))
    assert rl.engineer_ids == [e for e, _ in expected]
    assert np.allclose([s for _, s in rl.entries], [s for _, s in expected])
    assert len(rank_engineers(q, index, exclude=ids)) == 0
    with pytest.raises(ValueError):
        rank_engineers(q, EngineerIndex([], np.zeros((0, 5))))


def test_engineer_index_round_trip(tmp_path):
    idx = EngineerIndex(["a", "b"], np.eye(2), "abc", {"b"})
    idx.save(tmp_path / "i.npz")
    back = EngineerIndex.load(tmp_path / "i.npz")
    assert back.engineer_ids == ["a", "b"] and np.array_equal(back.vectors, np.eye(2))
    assert back.model_hash == "abc" and back.flagged == {"b"}
    assert np.array_equal(back["b"], [0.0, 1.0])


def test_query_parsing(tmp_path):
    obj = {"description": "d", "communication_summary": "c", "component_ids": ["CA"],
           "current_swarm": ["e1", "e1", "e2"], "created_date": "2020-03-04"}
    p = tmp_path / "q.json"
    p.write_text(json.dumps(obj))
    q = Query.read(p)
    assert q.current_swarm == ("e1", "e2") and q.text == "d\nc" and not q.degraded
    assert Query().degraded


def _fitted_parts(corpus, n_layers=1):
    fz = NodeFeaturizer(text_dim=8, min_df=1, max_df_ratio=1.0)
    feats = fz.fit_transform(corpus)
    model = init_model(feats.dim, n_layers=n_layers, msg_dim=6, hidden_dim=6, embed_dim=4, seed=2)
    return fz, feats, model


def test_inductive_query_equals_isolated_graph_node(tiny_corpus):
    # i5 has no processors and no swarm: its only edge is TAGGED to CB
    walk = WalkConfig(walk_length=1)
    fz, feats, model = _fitted_parts(tiny_corpus)
    g = build_graph(tiny_corpus)
    node_emb = embed_nodes(model, g, feats, [incident("i5")], walk, np.random.default_rng(0))[incident("i5")]
    without = dataclasses.replace(tiny_corpus, incidents=tiny_corpus.incidents[:4])
    g2 = build_graph(without)
    inc = tiny_corpus.incident_by_id["i5"]
    q = Query(inc.description, inc.communication_summary, inc.component_ids)
    got = embed_incident(model, g2, IncidentFeatureBuilder(fz, feats), q, walk, np.random.default_rng(0))
    assert np.allclose(got, node_emb, atol=1e-12)


def test_degraded_query_is_flagged(tiny_corpus, caplog):
    fz, feats, model = _fitted_parts(tiny_corpus)
    g = build_graph(tiny_corpus)
    builder = IncidentFeatureBuilder(fz, feats)
    space = prepare_queries(g, builder, [Query("qqq zzz", "", ()), Query("soap adapter", "", ("CA",))], 1,
                            WalkConfig(), np.random.default_rng(0))
    assert space.flagged.tolist() == [True, False]
    assert "low-confidence" in caplog.text


def test_engineer_index_is_deterministic(tiny_corpus):
    fz, feats, model = _fitted_parts(tiny_corpus, n_layers=2)
    g = build_graph(tiny_corpus)
    a = build_engineer_index(model, g, feats, WalkConfig(), seed=4)
    b = build_engineer_index(model, g, feats, WalkConfig(), seed=4)
    assert a.engineer_ids == ["e1", "e2", "e3", "e4"]
    assert np.array_equal(a.vectors, b.vectors) and a.model_hash == model.content_hash()


def test_gnn_ranker_estimator(tiny_corpus):
    ranker = GnnRanker(train_config=TrainConfig(epochs=2), walk_config=SMALL_WALK, text_dim=8, min_df=1,
                       max_df_ratio=1.0, n_layers=1, msg_dim=6, hidden_dim=6, embed_dim=4)
    assert ranker.get_params()["embed_dim"] == 4
    with pytest.raises(NotFittedError):
        ranker.rank(Query("x", "", ("CA",)))
    ranker.fit(tiny_corpus, tiny_corpus)
    assert len(ranker.history_) >= 1
    rl = ranker.rank(Query("soap timeout", "", ("CA",), current_swarm=("e2",)))
    assert sorted(rl.engineer_ids) == ["e1", "e3", "e4"]
    many = ranker.rank_many([Query("soap timeout", "", ("CA",)), Query("period", "", ("CB",))])
    assert [len(r) for r in many] == [4, 4]
    assert ranker.rank_many([]) == []
    kbas = ranker.kba_scores(Query("soap timeout", "", ("CA",)))
    assert sorted(k for k, _ in kbas) == ["k1", "k2"] and kbas[0][1] >= kbas[1][1]
    assert len(ranker.kba_scores(Query("soap", "", ("CA",)), top=1)) == 1
    # rebuilding around the trained model reproduces the index
    again = GnnRanker.from_parts(ranker.model_, ranker.featurizer_, tiny_corpus, **ranker.get_params())
    assert np.array_equal(again.index_.vectors, ranker.index_.vectors)
