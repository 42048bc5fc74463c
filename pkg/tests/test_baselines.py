import dataclasses
import datetime as dt
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import incident as make_incident
from swarmrank.baselines import (
    EngineerDocProfile, PopularityRanker, RandomRanker, StaticWeights, TfidfRanker, WeightedFeatureRanker,
    popularity_rank, random_rank, tfidf_rank,
)
from swarmrank.featurize import Vocabulary, corpus_documents, fit_vocabulary
from swarmrank.ingest import ComponentRecord, Corpus, EngineerRecord, KbaRecord
from swarmrank.rank import Query

from test_featurize import brute_tokens

D = dt.date


def _five_engineer_corpus():
    comps = (ComponentRecord("CA", "soap adapter"), ComponentRecord("CB", "ledger period"))
    engs = tuple(EngineerRecord(f"e{j}") for j in range(1, 6))
    incs = (
        make_incident("i1", ["e1"], ["CA"], D(2019, 1, 1), "soap adapter timeout gateway"),
        make_incident("i2", ["e2"], ["CA"], D(2019, 2, 1), "gateway certificate expired"),
        make_incident("i3", ["e3"], ["CB"], D(2019, 3, 1), "ledger period closed"),
        make_incident("i4", ["e2", "e3"], ["CB"], D(2019, 4, 1), "period close posting ledger slow"),
    )
    kbas = (KbaRecord("k1", "adapter timeout tuning soap", "e4", (), "how-to", "CA", D(2019, 1, 5)),)
    return Corpus(incs, engs, kbas, (), comps)


def _brute_tfidf_dict(text, docs_df, n_docs, vocab):
    tf = Counter(w for w in brute_tokens(text) if w in vocab)
    vec = {w: c * (math.log((1 + n_docs) / (1 + docs_df[w])) + 1) for w, c in tf.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return {w: v / norm for w, v in vec.items()} if norm else {}


def test_tfidf_matches_brute_force_cosine():
    corpus = _five_engineer_corpus()
    docs = corpus_documents(corpus)
    vocab = set(fit_vocabulary(docs, 1, 1.0).terms)
    df = Counter(w for d in docs for w in set(brute_tokens(d)))
    query = "soap gateway timeout ledger"
    q = _brute_tfidf_dict(query, df, len(docs), vocab)
    owned = {"e1": ["i1"], "e2": ["i2", "i4"], "e3": ["i3", "i4"], "e4": ["k1"], "e5": []}
    expected = {}
    for eid, items in owned.items():
        best = 0.0
        for item in items:
            text = corpus.kba_by_id[item].full_text if item.startswith("k") else corpus.incident_by_id[item].text
            d = _brute_tfidf_dict(text, df, len(docs), vocab)
            best = max(best, sum(q.get(w, 0.0) * v for w, v in d.items()))
        expected[eid] = best
    ranker = TfidfRanker(min_df=1, max_df_ratio=1.0).fit(corpus)
    got = dict(ranker.rank(Query(query)).entries)
    assert got.keys() == expected.keys()
    for eid in expected:
        assert abs(got[eid] - expected[eid]) < 1e-9


def test_tfidf_identical_document_scores_one():
    corpus = _five_engineer_corpus()
    ranker = TfidfRanker(min_df=1, max_df_ratio=1.0).fit(corpus)
    rl = ranker.rank(Query(corpus.incident_by_id["i3"].text))
    assert rl.engineer_ids[0] == "e3" and abs(rl.entries[0][1] - 1.0) < 1e-9


def test_tfidf_oov_query_is_id_order():
    ranker = TfidfRanker(min_df=1, max_df_ratio=1.0).fit(_five_engineer_corpus())
    rl = ranker.rank(Query("qqqq zzzz"))
    assert rl.engineer_ids == ["e1", "e2", "e3", "e4", "e5"] and all(s == 0 for _, s in rl.entries)


def test_tfidf_invariant_to_duplicate_documents():
    corpus = _five_engineer_corpus()
    dup = dataclasses.replace(corpus.incidents[0], incident_id="i1b")
    doubled = dataclasses.replace(corpus, incidents=corpus.incidents + (dup,))
    vocab = fit_vocabulary(corpus_documents(corpus), 1, 1.0)
    a = tfidf_rank(EngineerDocProfile.build(corpus, vocab), vocab, "soap adapter")
    b = tfidf_rank(EngineerDocProfile.build(doubled, vocab), vocab, "soap adapter")
    assert a == b


def test_tfidf_empty_vocabulary_and_mean_pooling():
    corpus = _five_engineer_corpus()
    vocab = fit_vocabulary(corpus_documents(corpus), 1, 1.0)
    profiles = EngineerDocProfile.build(corpus, vocab)
    with pytest.raises(ValueError):
        tfidf_rank(profiles, Vocabulary((), np.zeros(0, dtype=np.int64), 1, 1, 1.0), "x")
    mean = tfidf_rank(profiles, vocab, "ledger period", pooling="mean")
    best = tfidf_rank(profiles, vocab, "ledger period", pooling="max")
    assert dict(mean.entries)["e3"] <= dict(best.entries)["e3"]
    with pytest.raises(ValueError):
        tfidf_rank(profiles, vocab, "x", pooling="median")


# weighted feature ranker


def test_weighted_all_zero_weights():
    w = StaticWeights(0.0, 0.0, 0.0, 0.0)
    ranker = WeightedFeatureRanker(w).fit(_five_engineer_corpus())
    rl = ranker.rank(Query("soap", "", ("CA",)))
    assert rl.engineer_ids == ["e1", "e2", "e3", "e4", "e5"] and all(s == 0 for _, s in rl.entries)


def test_weighted_solved_only_ranks_top_solver_first():
    ranker = WeightedFeatureRanker(StaticWeights(1.0, 0.0, 0.0, 0.0)).fit(_five_engineer_corpus())
    # e3 resolved i3 and i4 in CB
    assert ranker.rank(Query("", "", ("CB",))).engineer_ids[0] == "e3"


def test_weighted_matches_spreadsheet_recomputation(tiny_corpus):
    w = StaticWeights(1.0, 0.5, 1.0, 0.5, half_life_days=30.0)
    ranker = WeightedFeatureRanker(w, min_df=1, max_df_ratio=1.0).fit(tiny_corpus)
    query = Query("soap adapter", "", ("CA",), created_date=D(2020, 3, 1))
    text = dict(TfidfRanker(1, 1.0).fit(tiny_corpus).rank(query).entries)
    # per engineer: resolved in CA, KBAs in CA, last activity (incidents, KBAs, swarms)
    sheet = {
        "e1": (2, 1, D(2020, 2, 2)),
        "e2": (0, 1, D(2019, 1, 6)),
        "e3": (1, 0, D(2020, 2, 2)),
        "e4": (0, 0, D(2019, 1, 6)),
    }
    for eid, score in ranker.rank(query).entries:
        solved, kb, last = sheet[eid]
        days = (D(2020, 3, 1) - last).days
        want = (math.log(1 + solved) + 0.5 * math.log(1 + kb) + text[eid]
                + 0.5 * math.exp(-days * math.log(2) / 30.0))
        assert abs(score - want) < 1e-12, eid


def test_static_weights_validation():
    with pytest.raises(ValueError):
        StaticWeights(w_solved=math.inf)
    with pytest.raises(ValueError):
        StaticWeights(half_life_days=0)


# popularity and random


def test_popularity(tiny_corpus):
    assert popularity_rank(tiny_corpus).engineer_ids == ["e1", "e3", "e2", "e4"]
    single = dataclasses.replace(tiny_corpus, engineers=(EngineerRecord("e1"),))
    assert popularity_rank(single).engineer_ids == ["e1"]
    rl = PopularityRanker().fit(tiny_corpus).rank(Query(current_swarm=("e1",)))
    assert rl.engineer_ids == ["e3", "e2", "e4"]


def test_random_rank_seeded():
    ids = [f"e{j}" for j in range(20)]
    a = random_rank(ids, np.random.default_rng(3))
    b = random_rank(ids, np.random.default_rng(3))
    assert a == b and sorted(a.engineer_ids) == sorted(ids)
    assert random_rank(["solo"], np.random.default_rng(0)).engineer_ids == ["solo"]


def test_random_hit_rate_monte_carlo():
    n, k, trials = 40, 10, 20_000
    rng = np.random.default_rng(0)
    ids = [f"e{j:02d}" for j in range(n)]
    truth = rng.integers(n, size=trials)
    hits = sum(ids[t] in random_rank(ids, rng).top_k(k) for t in truth)
    assert abs(hits / trials - k / n) < 0.02


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100))
def test_baselines_return_full_permutations(small_synth, seed):
    _, _, _, (train_c, _, test_c) = small_synth
    q = Query(test_c.incidents[seed % len(test_c.incidents)].description, "",
              test_c.incidents[seed % len(test_c.incidents)].component_ids)
    for ranker in (TfidfRanker(), WeightedFeatureRanker(), PopularityRanker(), RandomRanker(seed)):
        rl = ranker.fit(train_c).rank(q)
        assert sorted(rl.engineer_ids) == list(train_c.engineer_ids)


def test_baselines_only_see_the_fitted_split(small_synth):
    # KBAs are shared context across splits; incident outcomes come from the fitted split alone
    _, _, _, (train_c, _, _) = small_synth
    tf = TfidfRanker().fit(train_c)
    assert tf.vocabulary_.n_docs == len(corpus_documents(train_c))
    n_docs = sum(len(train_c.kbas_by.get(e, ())) + len(train_c.processed_by.get(e, ())) for e in train_c.engineer_ids)
    assert tf.profiles_.matrix.shape[0] == n_docs
    wf = WeightedFeatureRanker().fit(train_c)
    assert wf.solved_.sum() == sum(len(i.component_ids) for i in train_c.incidents if i.resolver_id)
    last_train = max(i.created_date for i in train_c.incidents)
    assert wf.reference_date_ <= max(last_train, max(k.created_date for k in train_c.kbas),
                                     max(s.created_date for s in train_c.swarms))
