import datetime as dt

import numpy as np
import pytest

from swarmrank.ingest import (
    ComponentRecord, Corpus, EngineerRecord, IncidentRecord, KbaRecord, SwarmRecord, join_corpus, split_by_time,
)
from swarmrank.synthgen import SynthConfig, generate

D = dt.date


def incident(iid, procs, comps, day, desc="", comm=""):
    return IncidentRecord(iid, desc, comm, tuple(procs), tuple(comps), day, None)


@pytest.fixture
def tiny_corpus() -> Corpus:
    """Hand-sized corpus: 4 engineers, 2 components, 5 incidents, 2 KBAs, 2 swarms."""
    comps = (ComponentRecord("CA", "adapter soap gateway timeout"), ComponentRecord("CB", "ledger posting period close"))
    engs = (
        EngineerRecord("e1", {"CA": 5}),
        EngineerRecord("e2", {"CA": 3, "CB": 1}),
        EngineerRecord("e3", {"CB": 4}),
        EngineerRecord("e4", {}),
    )
    incs = (
        incident("i1", ["e2", "e1"], ["CA"], D(2019, 1, 5), "soap adapter error 503",
                 "[CUSTOMER] gateway times out\n[e2] checking adapter\n[e1] fixed soap timeout"),
        incident("i2", ["e1"], ["CA"], D(2019, 3, 1), "adapter certificate expired", "[CUSTOMER] cert issue"),
        incident("i3", ["e3"], ["CB"], D(2019, 6, 1), "posting period closed", "[e3] reopened period"),
        incident("i4", ["e1", "e3"], ["CA", "CB"], D(2020, 2, 1), "ledger soap sync", "[CUSTOMER] sync broken"),
        incident("i5", [], ["CB"], D(2020, 8, 1), "period close slow", ""),
    )
    kbas = (
        KbaRecord("k1", "soap adapter timeout settings", "e1", ("e2",), "how-to", "CA", D(2018, 12, 1)),
        KbaRecord("k2", "period close checklist", "e3", (), "configuration", "CB", D(2019, 2, 1)),
    )
    swarms = (
        SwarmRecord("s1", "i1", "e2", ("e1", "e4"), ("k1",), "CA", D(2019, 1, 6)),
        SwarmRecord("s2", "i4", "e1", ("e3",), (), "CB", D(2020, 2, 2)),
    )
    return Corpus(incs, engs, kbas, swarms, comps)


@pytest.fixture(scope="session")
def small_synth():
    """A small synthetic corpus with planted experts, joined and split."""
    cfg = SynthConfig(n_engineers=40, n_components=6, n_incidents=900, n_kbas=90, experts_per_component=5,
                      vocab_per_component=30, shared_vocab=60, text_len=24, seed=7, sentinel="zzsentinel")
    raw, planted = generate(cfg)
    corpus = join_corpus(raw.incidents, raw.engineers, raw.kbas, raw.swarms, raw.components, 5000)
    train, val, test = split_by_time(corpus, D(2020, 1, 1), D(2020, 7, 1))
    return cfg, corpus, planted, (train, val, test)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
